"""AC power flow in polar coordinates by full Newton-Raphson.

Sign convention: injections are positive into the network, so a load of
``P + jQ`` is an injection of ``-P - jQ`` and a PV unit producing ``P`` is
``+P``. All quantities are per-unit on the network base.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .netmodel import Network

__all__ = [
    "InjectionSet",
    "SolverSettings",
    "PowerFlowSolution",
    "build_admittance",
    "load_injections",
    "solve_ac_power_flow",
]


@dataclass(frozen=True)
class SolverSettings:
    tolerance: float = 1e-8
    max_iterations: int = 50

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("solver tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True)
class InjectionSet:
    """Net injections per bus (network order), p.u.; slack entries are ignored."""

    p_inj: np.ndarray
    q_inj: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p_inj, dtype=float)
        q = np.asarray(self.q_inj, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ValueError("p_inj and q_inj must be 1-D arrays of equal length")
        object.__setattr__(self, "p_inj", p)
        object.__setattr__(self, "q_inj", q)


@dataclass(frozen=True)
class PowerFlowSolution:
    v_mag: np.ndarray
    v_ang: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    status: str = "converged"  # "converged", "max_iterations" or "singular"

    @property
    def voltage(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)

    @property
    def v_max(self) -> float:
        return float(self.v_mag.max())


def build_admittance(net: Network) -> np.ndarray:
    """Dense complex bus admittance matrix, pi-model branches plus bus shunts."""
    n = net.n_bus
    idx = net.index_of
    y = np.zeros((n, n), dtype=complex)
    for br in net.branches:
        f, t = idx[br.from_bus], idx[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        ysh = 0.5j * br.b_charging
        y[f, f] += ys + ysh
        y[t, t] += ys + ysh
        y[f, t] -= ys
        y[t, f] -= ys
    for k, b in enumerate(net.buses):
        y[k, k] += complex(b.g_shunt, b.b_shunt) / net.base_mva
    return y


def load_injections(net: Network, demand_scale: float = 1.0) -> InjectionSet:
    """Injections for the bus loads scaled by ``demand_scale`` and no generation."""
    return InjectionSet(-demand_scale * net.p_load_pu, -demand_scale * net.q_load_pu)


def solve_ac_power_flow(
    net: Network,
    inj: InjectionSet,
    settings: SolverSettings = SolverSettings(),
    initial: np.ndarray | None = None,
) -> PowerFlowSolution:
    """Solve the AC power flow for the given injections.

    Starts flat (all magnitudes at the slack setpoint, angles zero) unless a
    complex ``initial`` voltage vector is supplied. Every non-slack bus is PQ.
    A solution that fails to converge within ``settings.max_iterations`` or
    hits a singular Jacobian is returned with ``converged=False``.
    """
    n = net.n_bus
    if inj.p_inj.shape != (n,):
        raise ValueError(f"injection vectors must have length {n}")
    if not (np.all(np.isfinite(inj.p_inj)) and np.all(np.isfinite(inj.q_inj))):
        raise ValueError("injections must be finite")
    y = net.admittance
    s = net.slack_index
    vs = net.slack_voltage
    pq = np.array([k for k in range(n) if k != s])
    npq = len(pq)
    s_spec = inj.p_inj + 1j * inj.q_inj

    if initial is None:
        vm = np.full(n, vs)
        va = np.zeros(n)
    else:
        vm = np.abs(initial).astype(float)
        va = np.angle(initial).astype(float)
        vm[s], va[s] = vs, 0.0
    v = vm * np.exp(1j * va)

    def mismatch(v):
        mis = v * np.conj(y @ v) - s_spec
        f = np.concatenate([mis.real[pq], mis.imag[pq]])
        return f, float(np.max(np.abs(f))) if npq else 0.0

    f, norm = mismatch(v)
    it = 0
    status = "converged"
    while norm > settings.tolerance:
        if it >= settings.max_iterations:
            status = "max_iterations"
            break
        ibus = y @ v
        vnorm = v / vm
        ds_dvm = v[:, None] * np.conj(y * vnorm[None, :])
        ds_dvm[np.diag_indices(n)] += np.conj(ibus) * vnorm
        ds_dva = -1j * v[:, None] * np.conj(y * v[None, :])
        ds_dva[np.diag_indices(n)] += 1j * v * np.conj(ibus)
        sub_a = ds_dva[np.ix_(pq, pq)]
        sub_m = ds_dvm[np.ix_(pq, pq)]
        jac = np.block([[sub_a.real, sub_m.real], [sub_a.imag, sub_m.imag]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            status = "singular"
            break
        if not np.all(np.isfinite(dx)):
            status = "singular"
            break
        va[pq] += dx[:npq]
        vm[pq] += dx[npq:]
        v = vm * np.exp(1j * va)
        it += 1
        f, norm = mismatch(v)
        if not np.isfinite(norm):
            status = "max_iterations"
            break
    vm = np.abs(v)
    vm[s] = vs
    return PowerFlowSolution(
        v_mag=vm,
        v_ang=np.angle(v),
        converged=status == "converged",
        iterations=it,
        max_mismatch=norm,
        status=status,
    )
