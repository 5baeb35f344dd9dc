"""Hosting-capacity solvers and risk curves.

Every GP-based estimator scans a uniform grid of penetration levels strictly
inside (0, 1) and returns the largest level whose voltage constraint holds.
The constraints differ only in how many predictive standard deviations are
added to the mean, so they share :func:`pvhc.gpr.upper_band`:

========== =========================================
gp_mean    ``mu(x) <= v_limit``
gp_bounds  ``mu(x) +/- z(1 - alpha/2) sigma(x) <= v_limit``
gp_cc      ``mu(x) + z(1 - beta) sigma(x) <= v_limit``
========== =========================================

The logit estimator inverts ``sigmoid(b0 + b1 x) <= beta`` in closed form.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logit as _logit

from .gpr import GprModel, gp_risk_index, upper_band
from .logit import LogitModel, logit_violation_prob
from .probdist import normal_inv_cdf

__all__ = [
    "HC_METHODS",
    "HcQuery",
    "HcResult",
    "RiskCurve",
    "hc_grid",
    "solve_gp_wocc_hc",
    "solve_gp_hc_bounds",
    "solve_gp_cc_hc",
    "solve_logit_cc_hc",
    "run_query",
    "compute_risk_curve",
    "result_to_dict",
    "write_risk_curve_csv",
]

HC_METHODS = ("gp_mean", "gp_bounds", "gp_cc", "logit_cc")


@dataclass(frozen=True)
class HcQuery:
    method: str
    beta: float | None = None
    alpha: float | None = None
    v_limit: float = 1.05
    grid_points: int = 2001

    def __post_init__(self):
        if self.method not in HC_METHODS:
            raise ValueError(f"unknown HC method {self.method!r}; expected one of {HC_METHODS}")
        wants_beta = self.method in ("gp_cc", "logit_cc")
        wants_alpha = self.method == "gp_bounds"
        if wants_beta != (self.beta is not None):
            raise ValueError(f"{self.method} {'requires' if wants_beta else 'does not take'} beta")
        if wants_alpha != (self.alpha is not None):
            raise ValueError(f"{self.method} {'requires' if wants_alpha else 'does not take'} alpha")
        for name in ("beta", "alpha"):
            v = getattr(self, name)
            if v is not None and not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if not self.v_limit > 0:
            raise ValueError("v_limit must be positive")
        if self.grid_points < 2:
            raise ValueError("grid_points must be at least 2")


@dataclass(frozen=True)
class HcResult:
    """Hosting capacity as a fraction of peak load, plus search diagnostics.

    ``binding_value`` is the constraint left-hand side at the returned point:
    a voltage in p.u. for GP methods and a probability for ``logit_cc``.
    ``hc_mw`` is ``None`` when no peak load was supplied.
    """

    method: str
    hc: float
    hc_mw: float | None
    feasible_set_contiguous: bool
    binding_value: float
    parameters: dict = field(default_factory=dict)
    diagnostics: tuple[str, ...] = ()
    bound: str | None = None  # "lower"/"upper" for gp_bounds


@dataclass(frozen=True)
class RiskCurve:
    grid: np.ndarray
    gp_risk: np.ndarray
    logit_risk: np.ndarray

    def __post_init__(self):
        if not (len(self.grid) == len(self.gp_risk) == len(self.logit_risk)):
            raise ValueError("risk-curve columns must have equal length")


def hc_grid(grid_points: int) -> np.ndarray:
    """``grid_points`` equally spaced levels strictly inside (0, 1)."""
    return np.linspace(0.0, 1.0, grid_points + 2)[1:-1]


def _count_runs(mask: np.ndarray) -> int:
    m = mask.astype(np.int8)
    return int(np.count_nonzero(np.diff(np.concatenate([[0], m])) == 1))


def _grid_search(method, grid, lhs, limit, peak_mw, params, bound=None, extra=()) -> HcResult:
    feasible = lhs <= limit
    diags = list(extra)
    runs = _count_runs(feasible)
    if not feasible.any():
        hc, binding = 0.0, float(lhs[0])
        diags.append("infeasible: constraint violated at every grid point; hc set to 0")
    else:
        last = int(np.flatnonzero(feasible)[-1])
        hc, binding = float(grid[last]), float(lhs[last])
        if feasible.all():
            diags.append("unconstrained: constraint holds on the whole grid; hc is the top grid point")
    if runs > 1:
        diags.append(f"non-contiguous feasible set ({runs} separate runs)")
    return HcResult(
        method=method,
        hc=hc,
        hc_mw=None if peak_mw is None else hc * peak_mw,
        feasible_set_contiguous=bool(runs == 1),
        binding_value=binding,
        parameters=params,
        diagnostics=tuple(diags),
        bound=bound,
    )


def _params(q: HcQuery) -> dict:
    d = {"v_limit": q.v_limit, "grid_points": q.grid_points}
    if q.beta is not None:
        d["beta"] = q.beta
    if q.alpha is not None:
        d["alpha"] = q.alpha
    return d


def solve_gp_wocc_hc(model: GprModel, q: HcQuery, peak_load_mw: float | None = None) -> HcResult:
    """Largest grid level whose predicted mean voltage stays within the limit."""
    grid = hc_grid(q.grid_points)
    return _grid_search("gp_mean", grid, upper_band(model, grid, 0.0), q.v_limit, peak_load_mw, _params(q))


def solve_gp_hc_bounds(model: GprModel, q: HcQuery, peak_load_mw: float | None = None):
    """Lower and upper HC from the two edges of the ``1 - alpha`` prediction interval.

    The lower HC constrains the upper edge of the interval and vice versa.
    """
    if q.alpha is None:
        raise ValueError("gp_bounds needs alpha")
    grid = hc_grid(q.grid_points)
    z = normal_inv_cdf(1.0 - q.alpha / 2.0)
    lower = _grid_search("gp_bounds", grid, upper_band(model, grid, z), q.v_limit, peak_load_mw, _params(q), "lower")
    upper = _grid_search("gp_bounds", grid, upper_band(model, grid, -z), q.v_limit, peak_load_mw, _params(q), "upper")
    return lower, upper


def solve_gp_cc_hc(model: GprModel, q: HcQuery, peak_load_mw: float | None = None) -> HcResult:
    """Largest grid level with ``P(V_max > v_limit) <= beta`` under the GP."""
    if q.beta is None:
        raise ValueError("gp_cc needs beta")
    grid = hc_grid(q.grid_points)
    z = normal_inv_cdf(1.0 - q.beta)
    return _grid_search("gp_cc", grid, upper_band(model, grid, z), q.v_limit, peak_load_mw, _params(q))


def solve_logit_cc_hc(model: LogitModel, q: HcQuery, peak_load_mw: float | None = None) -> HcResult:
    """Penetration where the logit violation probability reaches ``beta``.

    For ``b1 > 0`` the probability is increasing, so the answer is
    ``(logit(beta) - b0) / b1`` clamped to [0, 1]. Otherwise the feasible set
    is searched on the grid.
    """
    if q.beta is None:
        raise ValueError("logit_cc needs beta")
    params = _params(q)
    if model.b1 <= 0:
        grid = hc_grid(q.grid_points)
        return _grid_search(
            "logit_cc", grid, logit_violation_prob(model, grid), q.beta, peak_load_mw, params,
            extra=("non-increasing risk (b1 <= 0); solved by grid search",),
        )
    x = float((_logit(q.beta) - model.b0) / model.b1)
    diags = []
    if x <= 0:
        x = 0.0
        diags.append("infeasible: violation probability exceeds beta at zero penetration; hc set to 0")
    elif x >= 1:
        x = 1.0
        diags.append("unconstrained: violation probability below beta up to full penetration")
    return HcResult(
        method="logit_cc",
        hc=float(x),
        hc_mw=None if peak_load_mw is None else float(x) * peak_load_mw,
        feasible_set_contiguous=bool(x > 0),
        binding_value=logit_violation_prob(model, x),
        parameters=params,
        diagnostics=tuple(diags),
    )


def run_query(
    q: HcQuery,
    gp: GprModel | None,
    lr: LogitModel | None,
    peak_load_mw: float | None = None,
) -> list[HcResult]:
    """Dispatch one query; ``gp_bounds`` yields two results, the rest one."""
    if q.method == "logit_cc":
        if lr is None:
            raise ValueError("logit_cc query needs a fitted logit model")
        return [solve_logit_cc_hc(lr, q, peak_load_mw)]
    if gp is None:
        raise ValueError(f"{q.method} query needs a fitted GP model")
    if q.method == "gp_mean":
        return [solve_gp_wocc_hc(gp, q, peak_load_mw)]
    if q.method == "gp_cc":
        return [solve_gp_cc_hc(gp, q, peak_load_mw)]
    return list(solve_gp_hc_bounds(gp, q, peak_load_mw))


def compute_risk_curve(
    gp: GprModel,
    lr: LogitModel | None,
    grid_points: int = 101,
    v_limit: float = 1.05,
) -> RiskCurve:
    """GP and logit over-voltage risk on ``grid_points`` levels spanning [0, 1].

    The logit column is NaN when no logit model is available.
    """
    if grid_points < 2:
        raise ValueError("grid_points must be at least 2")
    grid = np.linspace(0.0, 1.0, grid_points)
    gp_r = np.asarray(gp_risk_index(gp, grid, v_limit))
    lr_r = logit_violation_prob(lr, grid) if lr is not None else np.full(grid_points, math.nan)
    return RiskCurve(grid, gp_r, np.asarray(lr_r))


def result_to_dict(r: HcResult) -> dict:
    d = {"method": r.method}
    if r.bound is not None:
        d["bound"] = r.bound
    d.update(
        parameters=dict(r.parameters),
        hc=r.hc,
        hc_mw=r.hc_mw,
        feasible_set_contiguous=r.feasible_set_contiguous,
        binding_value=r.binding_value,
        diagnostics=list(r.diagnostics),
    )
    return d


def write_risk_curve_csv(curve: RiskCurve, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["x", "gp_risk", "logit_risk"])
    for x, g, l in zip(curve.grid, curve.gp_risk, curve.logit_risk):
        w.writerow([repr(float(x)), repr(float(g)), "" if math.isnan(l) else repr(float(l))])
