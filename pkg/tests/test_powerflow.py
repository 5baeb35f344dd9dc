import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import random_radial_case, sweep_network, two_bus_voltage
from pvhc import netmodel, powerflow
from pvhc.powerflow import InjectionSet, SolverSettings, build_admittance, load_injections, solve_ac_power_flow

TWO_BUS = """
mpc.baseMVA = 1;
mpc.bus = [1 3 0 0 0 0 1 1 0 1 1 1.1 0.9; 2 1 0 0 0 0 1 1 0 1 1 1.1 0.9];
mpc.gen = [1 0 0 1 -1 1.03 1 1 1 0];
mpc.branch = [1 2 0 0.1 0 0 0 0 0 0 1 -360 360];
"""


@pytest.fixture(scope="module")
def case33():
    return netmodel.load_network("case33")


def test_two_bus_admittance():
    y = build_admittance(netmodel.parse_matpower_case(TWO_BUS))
    np.testing.assert_allclose(y, [[-10j, 10j], [10j, -10j]], atol=1e-12)


def test_row_sums_equal_shunts(case33):
    y = build_admittance(case33)
    shunt = np.array([complex(b.g_shunt, b.b_shunt) for b in case33.buses]) / case33.base_mva
    for br in case33.branches:
        shunt[case33.index_of[br.from_bus]] += 0.5j * br.b_charging
        shunt[case33.index_of[br.to_bus]] += 0.5j * br.b_charging
    np.testing.assert_allclose(y.sum(axis=1), shunt, atol=1e-9)


def test_capacitor_bank_in_diagonal(case33):
    y = build_admittance(case33)
    for bus in (18, 33):
        assert case33.buses[case33.index_of[bus]].b_shunt == pytest.approx(0.4)
    plain = netmodel.Network(
        case33.base_mva,
        tuple(b if b.id != 18 else netmodel.Bus(**{**b.__dict__, "b_shunt": 0.0}) for b in case33.buses),
        case33.branches,
    )
    i = case33.index_of[18]
    assert (y[i, i] - build_admittance(plain)[i, i]).imag == pytest.approx(0.4 / case33.base_mva)


def test_no_load_flat(case33):
    flat = netmodel.Network(
        case33.base_mva,
        tuple(netmodel.Bus(b.id, b.kind, base_kv=b.base_kv, v_set=b.v_set) for b in case33.buses),
        case33.branches,
    )
    sol = solve_ac_power_flow(flat, InjectionSet(np.zeros(33), np.zeros(33)))
    np.testing.assert_allclose(sol.v_mag, 1.03, atol=1e-12)
    np.testing.assert_allclose(sol.v_ang, 0.0, atol=1e-12)


def test_peak_min_voltage(case33):
    sol = solve_ac_power_flow(case33, load_injections(case33))
    assert sol.converged and sol.v_mag.min() > 0.95


def test_two_bus_closed_form():
    net = netmodel.parse_matpower_case(
        TWO_BUS.replace("2 1 0 0", "2 1 0.1 0.05").replace("1 2 0 0.1", "1 2 0.01 0.05")
    )
    sol = solve_ac_power_flow(net, load_injections(net))
    assert sol.v_mag[1] == pytest.approx(two_bus_voltage(1.03, 0.1, 0.05, 0.01, 0.05), abs=1e-8)


def test_power_balance(case33):
    sol = solve_ac_power_flow(case33, load_injections(case33))
    v = sol.voltage
    s_bus = v * np.conj(build_admittance(case33) @ v)
    loads = -(case33.p_load_pu + 1j * case33.q_load_pu)
    s_slack = s_bus[case33.slack_index]
    losses = 0
    for br in case33.branches:
        a, b = case33.index_of[br.from_bus], case33.index_of[br.to_bus]
        i = (v[a] - v[b]) / complex(br.r, br.x)
        losses += abs(i) ** 2 * br.r
    shunt_p = sum(abs(v[k]) ** 2 * bb.g_shunt / case33.base_mva for k, bb in enumerate(case33.buses))
    balance = s_slack.real + loads.real.sum() - losses - shunt_p
    assert abs(balance) < 10 * 1e-8


def test_scaling_invariance(case33):
    k = 7.0
    scaled = netmodel.Network(
        case33.base_mva * k,
        tuple(
            netmodel.Bus(b.id, b.kind, b.p_load * k, b.q_load * k, b.g_shunt * k, b.b_shunt * k, b.base_kv, b.v_set)
            for b in case33.buses
        ),
        case33.branches,
    )
    a = solve_ac_power_flow(case33, load_injections(case33))
    b = solve_ac_power_flow(scaled, load_injections(scaled))
    np.testing.assert_allclose(a.voltage, b.voltage, atol=1e-10)


def test_random_radial_vs_sweep():
    rng = np.random.default_rng(11)
    for _ in range(10):
        text, p, q = random_radial_case(rng, int(rng.integers(2, 7)))
        net = netmodel.parse_matpower_case(text, pcc_voltage=1.02)
        sol = solve_ac_power_flow(net, load_injections(net))
        np.testing.assert_allclose(sol.voltage, sweep_network(net, p, q), atol=1e-6)


def test_non_convergence_flagged(case33):
    heavy = load_injections(case33, demand_scale=40.0)
    sol = solve_ac_power_flow(case33, heavy, SolverSettings(max_iterations=10))
    assert not sol.converged and sol.status in ("max_iterations", "singular")


@settings(max_examples=25, deadline=None)
@given(scale=st.floats(0.0, 1.5))
def test_mismatch_below_tolerance(case33, scale):
    sol = solve_ac_power_flow(case33, load_injections(case33, scale))
    assert sol.converged and sol.max_mismatch <= 1e-8
