"""Local droop voltage control of PV inverters and storage units.

Sign convention: absorbed reactive power and ESS charging are negative
injections. PV active output is never curtailed by these laws.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netmodel import Network
from .powerflow import InjectionSet, PowerFlowSolution, SolverSettings, solve_ac_power_flow

__all__ = [
    "CONTROL_MODES",
    "DroopBreakpoints",
    "EssUnit",
    "ControlConfig",
    "ControlResult",
    "volt_var_q",
    "power_factor",
    "pf_control_q",
    "ess_power",
    "iterate_control",
]

CONTROL_MODES = ("none", "volt_var", "power_factor", "ess")


@dataclass(frozen=True)
class DroopBreakpoints:
    v1: float = 0.95
    v2: float = 0.97
    v3: float = 1.03
    v4: float = 1.05

    def __post_init__(self):
        if not self.v1 < self.v2 < self.v3 < self.v4:
            raise ValueError("droop breakpoints must satisfy v1 < v2 < v3 < v4")

    @property
    def points(self) -> list[float]:
        return [self.v1, self.v2, self.v3, self.v4]


@dataclass(frozen=True)
class EssUnit:
    bus: int
    p_max: float  # kW

    def __post_init__(self):
        if not self.p_max > 0:
            raise ValueError("ESS rating must be positive")


@dataclass(frozen=True)
class ControlConfig:
    mode: str = "none"
    breakpoints: DroopBreakpoints = field(default_factory=DroopBreakpoints)
    c1: float = 0.95
    ess_units: tuple[EssUnit, ...] = ()
    epsilon_v: float = 0.005
    max_control_iters: int = 30
    damping: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "ess_units", tuple(self.ess_units))
        if self.mode not in CONTROL_MODES:
            raise ValueError(f"unknown control mode {self.mode!r}; expected one of {CONTROL_MODES}")
        if not 0 < self.c1 <= 1:
            raise ValueError("minimum power factor c1 must lie in (0, 1]")
        if not self.epsilon_v > 0:
            raise ValueError("epsilon_v must be positive")
        if self.max_control_iters < 1:
            raise ValueError("max_control_iters must be at least 1")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class ControlResult:
    solution: PowerFlowSolution
    converged: bool
    iterations: int
    last_delta: float
    q_pv: np.ndarray  # MVar per PV bus, in scenario order
    p_ess: np.ndarray  # kW per ESS unit


def _droop_shape(v, bp: DroopBreakpoints):
    # +1 below v1, 0 in the dead band, -1 above v4, linear in between.
    return np.interp(v, bp.points, [1.0, 0.0, 0.0, -1.0])


def volt_var_q(v, p_pv, s_max, bp: DroopBreakpoints = DroopBreakpoints()):
    """Volt-Var reactive output of an inverter rated ``s_max`` producing ``p_pv``.

    The available reactive range is sqrt(s_max**2 - p_pv**2); output is in the
    same power unit as the inputs.
    """
    p_pv = np.asarray(p_pv, dtype=float)
    s_max = np.asarray(s_max, dtype=float)
    if np.any(p_pv > s_max * (1 + 1e-12)):
        raise ValueError("PV active output exceeds the inverter rating")
    q_max = np.sqrt(np.maximum(s_max**2 - p_pv**2, 0.0))
    out = _droop_shape(v, bp) * q_max
    return float(out) if out.ndim == 0 else out


def power_factor(v, cfg: ControlConfig):
    """Operating power factor of the adaptive-PF law at voltage ``v``."""
    bp = cfg.breakpoints
    out = np.interp(v, [bp.v3, bp.v4], [1.0, cfg.c1])
    return float(out) if np.ndim(out) == 0 else out


def pf_control_q(v, p_pv, cfg: ControlConfig):
    """Reactive output under adaptive power-factor control (absorbing above v3)."""
    p_pv = np.asarray(p_pv, dtype=float)
    if np.any(p_pv < 0):
        raise ValueError("PV active output must be non-negative")
    pf = power_factor(v, cfg)
    out = -p_pv * np.tan(np.arccos(pf))
    return float(out) if np.ndim(out) == 0 else out


def ess_power(v, unit: EssUnit, bp: DroopBreakpoints = DroopBreakpoints()):
    """ESS active power in kW; positive discharges, negative charges."""
    out = _droop_shape(v, bp) * unit.p_max
    return float(out) if np.ndim(out) == 0 else out


def iterate_control(
    net: Network,
    scenario,
    profile,
    cfg: ControlConfig,
    settings: SolverSettings = SolverSettings(),
) -> ControlResult:
    """Fixed-point iteration between local droop setpoints and the load flow.

    The base-case solve (PV at unity power factor, no storage) provides the
    first voltage measurement. Each round computes new setpoints from the
    measured voltages and re-solves; the loop stops once the largest change in
    bus voltage magnitude falls below ``cfg.epsilon_v``. Whenever successive
    voltage updates point in opposite directions, the setpoint update is
    multiplied by ``cfg.damping`` (cumulatively).
    """
    if cfg.mode == "none":
        raise ValueError("iterate_control needs an active control mode")
    base = net.base_mva
    idx = net.index_of
    p0 = net.p_load_pu * -profile.p_dn
    q0 = net.q_load_pu * -profile.p_dn
    pv_bus = np.array([idx[b] for b in scenario.capacities], dtype=int)
    cap = np.array([scenario.capacities[b] for b in scenario.capacities], dtype=float)
    p_pv = cap * profile.p_gn
    np.add.at(p0, pv_bus, p_pv / base)

    base_sol = solve_ac_power_flow(net, InjectionSet(p0, q0), settings)
    empty_q, empty_p = np.zeros(len(pv_bus)), np.zeros(len(cfg.ess_units))
    if not base_sol.converged:
        return ControlResult(base_sol, False, 0, np.inf, empty_q, empty_p)

    if cfg.mode == "ess":
        dev_bus = np.array([idx[u.bus] for u in cfg.ess_units], dtype=int)
        p_rated = np.array([u.p_max for u in cfg.ess_units], dtype=float)
    else:
        keep = cap > 0
        dev_bus = pv_bus[keep]
    if len(dev_bus) == 0:
        return ControlResult(base_sol, True, 0, 0.0, empty_q, empty_p)

    def setpoints(vm):
        vd = vm[dev_bus]
        if cfg.mode == "volt_var":
            return volt_var_q(vd, p_pv[keep], cap[keep], cfg.breakpoints)
        if cfg.mode == "power_factor":
            return pf_control_q(vd, p_pv[keep], cfg)
        return _droop_shape(vd, cfg.breakpoints) * p_rated

    sol = base_sol
    v = base_sol.v_mag
    current = np.zeros(len(dev_bus))
    prev_step = None
    relax = 1.0
    delta = np.inf
    converged = False
    it = 0
    for it in range(1, cfg.max_control_iters + 1):
        target = setpoints(v)
        current = current + relax * (target - current)
        p, q = p0.copy(), q0.copy()
        if cfg.mode == "ess":
            np.add.at(p, dev_bus, current / 1e3 / base)
        else:
            np.add.at(q, dev_bus, current / base)
        new = solve_ac_power_flow(net, InjectionSet(p, q), settings, initial=sol.voltage)
        if not new.converged:
            sol = new
            break
        step = new.v_mag - v
        delta = float(np.max(np.abs(step)))
        sol, v = new, new.v_mag
        if delta < cfg.epsilon_v:
            converged = True
            break
        # Voltages swinging back and forth signal a limit cycle: relax the
        # setpoint update, and relax further each time the swing persists.
        if prev_step is not None and step @ prev_step < 0:
            relax *= cfg.damping
        prev_step = step

    if cfg.mode == "ess":
        q_out, p_out = empty_q, current
    else:
        q_out = np.zeros(len(pv_bus))
        q_out[keep] = current
        p_out = empty_p
    return ControlResult(sol, converged and sol.converged, it, delta, q_out, p_out)
