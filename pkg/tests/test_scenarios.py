import io
import math

import numpy as np
import pytest
from scipy import stats

from pvhc import netmodel
from pvhc.control import ControlConfig
from pvhc.powerflow import InjectionSet, SolverSettings, solve_ac_power_flow
from pvhc.probdist import CopulaSpec
from pvhc.scenarios import (
    LoadGenProfile,
    PvScenario,
    SampleRecord,
    ScenarioConfig,
    evaluate_pair,
    generate_pv_scenarios,
    read_samples_csv,
    reduce_profiles,
    run_probabilistic_load_flow,
    sample_profiles,
    write_samples_csv,
)


@pytest.fixture(scope="module")
def case33():
    return netmodel.load_network("case33")


@pytest.fixture(scope="module")
def raw_profiles():
    return sample_profiles(ScenarioConfig(seed=3))


def test_profile_marginal_means(raw_profiles):
    p_dn = np.array([p.p_dn for p in raw_profiles])
    p_gn = np.array([p.p_gn for p in raw_profiles])
    assert len(raw_profiles) == 10000
    assert p_gn.mean() == pytest.approx(15 / 21, abs=0.01)
    assert p_dn.mean() == pytest.approx(0.5, abs=0.005)


def test_rho_changes_ranks_not_marginals(raw_profiles):
    ind = sample_profiles(ScenarioConfig(seed=3, copula=CopulaSpec(0.0)))
    for attr in ("p_dn", "p_gn"):
        a = [getattr(p, attr) for p in raw_profiles]
        b = [getattr(p, attr) for p in ind]
        assert stats.ks_2samp(a, b).statistic < 0.03
    ra = stats.spearmanr([p.p_dn for p in raw_profiles], [p.p_gn for p in raw_profiles]).statistic
    rb = stats.spearmanr([p.p_dn for p in ind], [p.p_gn for p in ind]).statistic
    assert ra - rb > 0.08


def test_reduce_identity(raw_profiles):
    few = raw_profiles[:5]
    assert reduce_profiles(few, 5, 0) == few
    same = [LoadGenProfile(0.5, 0.8)] * 4
    assert reduce_profiles(same, 4, 0) == same
    assert reduce_profiles(same + [LoadGenProfile(0.4, 0.7)], 4, 0)[0] in (LoadGenProfile(0.5, 0.8), LoadGenProfile(0.4, 0.7))


def test_reduce_tail_neighbourhood(raw_profiles):
    reps = reduce_profiles(raw_profiles, 4, 0, tail_fraction=0.01)
    assert len(reps) == 4
    for r in reps:
        assert 0.45 <= r.p_dn <= 0.56 and 0.90 <= r.p_gn <= 0.98
    assert [r.p_gn for r in reps] == sorted((r.p_gn for r in reps), reverse=True)


def test_reduce_deterministic_and_in_hull(raw_profiles):
    a = reduce_profiles(raw_profiles, 4, 7)
    assert a == reduce_profiles(raw_profiles, 4, 7)
    pts = np.array([(p.p_dn, p.p_gn) for p in raw_profiles])
    for r in a:
        assert pts[:, 0].min() <= r.p_dn <= pts[:, 0].max()
        assert pts[:, 1].min() <= r.p_gn <= pts[:, 1].max()


def test_reduce_too_many(raw_profiles):
    with pytest.raises(ValueError):
        reduce_profiles(raw_profiles[:3], 4, 0)


def test_single_candidate(case33):
    cfg = ScenarioConfig(n_location_scenarios=20, candidate_buses=(18,), per_bus_cap_factor=1e6, seed=1)
    for s in generate_pv_scenarios(case33, cfg):
        assert list(s.capacities) == [18]
        assert s.penetration == pytest.approx(s.capacities[18] / case33.peak_load_mw, rel=1e-12)


def test_scenarios_cover_range_and_caps(case33):
    cfg = ScenarioConfig(n_location_scenarios=3000, seed=4)
    scen = generate_pv_scenarios(case33, cfg)
    x = np.array([s.penetration for s in scen])
    assert x.min() < 0.1 and x.max() > 0.9
    peak = case33.peak_load_mw
    for s in scen:
        assert abs(math.fsum(s.capacities.values()) / peak - s.penetration) <= 1e-12
        for bus, c in s.capacities.items():
            assert 0 < c <= 1.5 * case33.buses[case33.index_of[bus]].p_load
    k = np.array([len(s.capacities) for s in scen])
    assert k.min() == 1 and k.max() >= 25


def test_scenarios_reject_bad_candidates(case33):
    with pytest.raises(ValueError):
        generate_pv_scenarios(case33, ScenarioConfig(n_location_scenarios=1, candidate_buses=(1,)))
    with pytest.raises(ValueError):
        generate_pv_scenarios(case33, ScenarioConfig(n_location_scenarios=1, candidate_buses=(999,)))


def test_zero_capacity_matches_plain_solve(case33):
    prof = LoadGenProfile(0.52, 0.95)
    vmax, ok = evaluate_pair(case33, PvScenario({}, 0.0), prof, ControlConfig(), SolverSettings())
    sol = solve_ac_power_flow(case33, InjectionSet(-0.52 * case33.p_load_pu, -0.52 * case33.q_load_pu))
    assert ok and vmax == sol.v_max
    assert vmax <= 1.03 + 1e-6


def test_plf_counts_order_and_parallel(case33):
    cfg = ScenarioConfig(n_location_scenarios=12, seed=5)
    scen = generate_pv_scenarios(case33, cfg)
    profs = [LoadGenProfile(0.5, 0.9), LoadGenProfile(0.5, 0.95)]
    serial = run_probabilistic_load_flow(case33, scen, profs)
    par = run_probabilistic_load_flow(case33, scen, profs, n_jobs=2)
    assert len(serial) == 24
    assert [(r.scenario_id, r.profile_id) for r in serial] == [(i, j) for i in range(12) for j in range(2)]
    assert serial == par


def test_vmax_trend_over_deciles(case33):
    cfg = ScenarioConfig(n_location_scenarios=400, seed=6)
    scen = generate_pv_scenarios(case33, cfg)
    recs = run_probabilistic_load_flow(case33, scen, [LoadGenProfile(0.5, 0.95)])
    x = np.array([r.x for r in recs])
    v = np.array([r.v_max for r in recs])
    edges = np.quantile(x, np.linspace(0, 1, 11))
    means = [v[(x >= a) & (x <= b)].mean() for a, b in zip(edges[:-1], edges[1:])]
    assert np.all(np.diff(means) >= 0)


def test_csv_round_trip():
    recs = [SampleRecord(0, 0, "none", 0.1234567890123, 1.0312345678901234), SampleRecord(0, 1, "none", 0.5, math.nan, False)]
    buf = io.StringIO()
    write_samples_csv(recs, buf)
    back = read_samples_csv(io.StringIO(buf.getvalue()))
    assert back[0] == recs[0]
    assert not back[1].converged and math.isnan(back[1].v_max)


def test_csv_bad_header():
    with pytest.raises(ValueError):
        read_samples_csv(io.StringIO("a,b\n1,2\n"))
