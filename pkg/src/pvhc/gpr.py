"""Exact Gaussian-process regression of maximum voltage on penetration level.

The kernel is squared exponential, ``k(x, x') = lambda_sq * exp(-(x - x')**2 / tau_sq)``,
with i.i.d. Gaussian observation noise of variance ``noise_var``. Outputs are
centered by their sample mean before fitting and shifted back on prediction.
Hyperparameters maximize the log marginal likelihood over log-parameters.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg, optimize
from scipy.stats import qmc
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .probdist import normal_cdf, normal_inv_cdf

__all__ = [
    "GprFitError",
    "GprHyperparams",
    "GprModel",
    "GprPrediction",
    "FitOptions",
    "kernel_eval",
    "kernel_matrix",
    "log_marginal_likelihood",
    "condition_gpr",
    "fit_gpr",
    "fit_gpr_xy",
    "predict",
    "prediction_interval",
    "upper_band",
    "gp_risk_index",
    "model_to_dict",
    "model_from_dict",
    "GaussianProcessVoltage",
]

log = logging.getLogger(__name__)

_JITTERS = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_LOG2PI = math.log(2 * math.pi)


class GprFitError(RuntimeError):
    """Raised when the covariance cannot be factorized or inputs are degenerate."""


@dataclass(frozen=True)
class GprHyperparams:
    lambda_sq: float
    tau_sq: float
    noise_var: float

    def __post_init__(self):
        for name in ("lambda_sq", "tau_sq", "noise_var"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be finite and positive, got {v!r}")

    @property
    def log_params(self) -> np.ndarray:
        return np.log([self.lambda_sq, self.tau_sq, self.noise_var])

    @classmethod
    def from_log(cls, theta) -> "GprHyperparams":
        a, b, c = np.exp(np.asarray(theta, dtype=float))
        return cls(float(a), float(b), float(c))


@dataclass(frozen=True, eq=False)
class GprModel:
    """Fitted GP: hyperparameters, centered training data and cached factors."""

    hyper: GprHyperparams
    train_x: np.ndarray
    train_y: np.ndarray
    center_m: float
    chol_factor: np.ndarray
    alpha_vec: np.ndarray
    jitter: float = 0.0

    def __post_init__(self):
        if self.train_x.shape != self.train_y.shape:
            raise ValueError("train_x and train_y must have equal length")

    @property
    def n_train(self) -> int:
        return len(self.train_x)


@dataclass(frozen=True)
class GprPrediction:
    mu: np.ndarray | float
    sigma_sq: np.ndarray | float

    @property
    def sigma(self):
        return np.sqrt(self.sigma_sq)


@dataclass(frozen=True)
class FitOptions:
    """Hyperparameter search settings.

    ``n_restarts`` Latin-hypercube starting points are drawn in log space
    inside ``start_box`` (each row a (low, high) pair of log10 multipliers,
    relative to the output variance for the two variances and to the squared
    input range for the length scale). Each start is climbed to
    ``coarse_gtol``; the best is then refined to ``gtol``.
    """

    n_restarts: int = 8
    seed: int = 0
    max_train: int = 2000
    start_box: tuple = ((-1.0, 1.0), (-3.0, 0.5), (-5.0, -0.5))
    coarse_gtol: float = 1e-3
    gtol: float = 1e-9
    max_iter: int = 500

    def __post_init__(self):
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be at least 1")
        if self.max_train < 10:
            raise ValueError("max_train must be at least 10")


def kernel_eval(xi, xj, hyper: GprHyperparams):
    """Squared-exponential covariance between ``xi`` and ``xj`` (broadcasting)."""
    d = np.subtract(xi, xj, dtype=float)
    out = hyper.lambda_sq * np.exp(-(d * d) / hyper.tau_sq)
    return float(out) if np.ndim(out) == 0 else out


def kernel_matrix(a, b, hyper: GprHyperparams) -> np.ndarray:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    return kernel_eval(a[:, None], b[None, :], hyper)


def _factor(k: np.ndarray, noise_var: float):
    # Cholesky of K + noise*I, escalating diagonal jitter on failure.
    n = len(k)
    scale = max(float(np.mean(np.diag(k))), 1.0) if n else 1.0
    for jit in _JITTERS:
        try:
            c = linalg.cholesky(k + (noise_var + jit * scale) * np.eye(n), lower=True)
            return c, jit
        except linalg.LinAlgError:
            continue
    raise GprFitError("covariance matrix is not positive definite even with jitter 1e-6")


def _lml_terms(theta, y, d2):
    hyper = GprHyperparams.from_log(theta)
    k = hyper.lambda_sq * np.exp(-d2 / hyper.tau_sq)
    c, _ = _factor(k, hyper.noise_var)
    alpha = linalg.cho_solve((c, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(c)).sum() - 0.5 * len(y) * _LOG2PI
    return hyper, k, c, alpha, lml


def _lml_grad(hyper, k, c, alpha, d2):
    # (K + noise*I)^-1 from the Cholesky factor; potri fills the lower triangle only.
    kinv, info = linalg.lapack.dpotri(c, lower=1)
    if info != 0:
        raise GprFitError("could not invert the covariance factor")
    kinv = np.tril(kinv) + np.tril(kinv, -1).T
    inner = np.outer(alpha, alpha) - kinv
    ik = inner * k
    # dK/dlog(lambda_sq) = K, dK/dlog(tau_sq) = K * d2 / tau_sq, dK/dlog(noise) = noise * I
    return np.array([
        0.5 * ik.sum(),
        0.5 * np.sum(ik * d2) / hyper.tau_sq,
        0.5 * hyper.noise_var * np.trace(inner),
    ])


def log_marginal_likelihood(theta, x, y, grad: bool = True):
    """Log marginal likelihood of centered outputs ``y`` and its gradient.

    ``theta`` holds ``log(lambda_sq), log(tau_sq), log(noise_var)``; the
    gradient is with respect to these log-parameters.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    d2 = (x[:, None] - x[None, :]) ** 2
    hyper, k, c, alpha, lml = _lml_terms(theta, y, d2)
    if not grad:
        return lml
    return lml, _lml_grad(hyper, k, c, alpha, d2)


def condition_gpr(x, y_raw, hyper: GprHyperparams, center_m: float | None = None) -> GprModel:
    """Build a model for fixed hyperparameters (no optimization)."""
    x = np.ascontiguousarray(x, dtype=float).ravel()
    y_raw = np.ascontiguousarray(y_raw, dtype=float).ravel()
    m = float(np.mean(y_raw)) if center_m is None else float(center_m)
    y = y_raw - m
    c, jit = _factor(kernel_matrix(x, x, hyper), hyper.noise_var)
    alpha = linalg.cho_solve((c, True), y)
    return GprModel(hyper, x, y, m, c, alpha, jit)


def _check_training(x, y):
    if len(x) != len(y):
        raise ValueError("x and y must have equal length")
    if len(x) < 10:
        raise GprFitError(f"need at least 10 training samples, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise GprFitError("training data must be finite")
    if np.ptp(x) == 0:
        raise GprFitError("training inputs are all identical")


def fit_gpr_xy(x, y, opts: FitOptions = FitOptions()) -> GprModel:
    """Fit hyperparameters by multi-start L-BFGS-B on the log marginal likelihood."""
    x = np.asarray(x, dtype=float).ravel()
    y_raw = np.asarray(y, dtype=float).ravel()
    _check_training(x, y_raw)
    if len(x) > opts.max_train:
        raise GprFitError(f"training set of {len(x)} exceeds max_train={opts.max_train}")
    m = float(np.mean(y_raw))
    yc = y_raw - m
    var_y = max(float(np.var(yc)), 1e-12)
    span_sq = float(np.ptp(x)) ** 2

    ref = np.log([var_y, span_sq, var_y])
    box = np.asarray(opts.start_box, dtype=float) * math.log(10.0)
    sampler = qmc.LatinHypercube(d=3, seed=np.random.default_rng(opts.seed))
    starts = ref + qmc.scale(sampler.random(opts.n_restarts), box[:, 0], box[:, 1])
    # Optimization box: wide enough that the optimum is interior in practice.
    bounds = [
        (ref[0] - 12 * math.log(10), ref[0] + 6 * math.log(10)),
        (ref[1] - 8 * math.log(10), ref[1] + 6 * math.log(10)),
        (ref[2] - 12 * math.log(10), ref[2] + 4 * math.log(10)),
    ]

    d2 = (x[:, None] - x[None, :]) ** 2

    def objective(theta):
        try:
            hyper, k, c, alpha, v = _lml_terms(theta, yc, d2)
            g = _lml_grad(hyper, k, c, alpha, d2)
        except GprFitError:
            return np.inf, np.zeros(3)
        return -v, -g

    def run(start, gtol, ftol):
        return optimize.minimize(
            objective, start, jac=True, method="L-BFGS-B", bounds=bounds,
            options={"gtol": gtol, "ftol": ftol, "maxiter": opts.max_iter},
        )

    # Coarse ascent from every start, then polish the best candidate.
    best = None
    for s in starts:
        res = run(s, opts.coarse_gtol, 1e-9)
        if not np.isfinite(res.fun):
            continue
        if best is None or res.fun < best.fun:
            best = res
    if best is None:
        raise GprFitError("log marginal likelihood could not be evaluated at any start")
    polished = run(best.x, opts.gtol, 1e-15)
    if np.isfinite(polished.fun) and polished.fun <= best.fun:
        best = polished
    hyper = GprHyperparams.from_log(best.x)
    log.debug("GPR fit: %s, -LML=%.6g, |grad|=%.3g", hyper, best.fun, np.linalg.norm(best.jac))
    return condition_gpr(x, y_raw, hyper, center_m=m)


def fit_gpr(samples: Sequence, opts: FitOptions = FitOptions()) -> GprModel:
    """Fit a GP to converged :class:`~pvhc.scenarios.SampleRecord` items."""
    used = [s for s in samples if getattr(s, "converged", True)]
    x = np.array([s.x for s in used], dtype=float)
    y = np.array([s.v_max for s in used], dtype=float)
    return fit_gpr_xy(x, y, opts)


def predict(model: GprModel, x_star) -> GprPrediction:
    """Predictive mean and variance of a new observation at ``x_star``.

    The variance includes the observation noise, so it describes where a new
    measured ``V_max`` would fall rather than the latent mean alone.
    """
    scalar = np.ndim(x_star) == 0
    xs = np.atleast_1d(np.asarray(x_star, dtype=float))
    ks = kernel_matrix(model.train_x, xs, model.hyper)
    mu = ks.T @ model.alpha_vec + model.center_m
    v = linalg.solve_triangular(model.chol_factor, ks, lower=True)
    var = model.hyper.lambda_sq - np.einsum("ij,ij->j", v, v) + model.hyper.noise_var
    if np.any(var < -1e-10):
        raise FloatingPointError(f"negative predictive variance {var.min():.3g}")
    var = np.maximum(var, 0.0)
    if scalar:
        return GprPrediction(float(mu[0]), float(var[0]))
    return GprPrediction(mu, var)


def upper_band(model: GprModel, x_star, z: float):
    """``mu + z * sigma``; the left-hand side of every GP voltage constraint."""
    pred = predict(model, x_star)
    return pred.mu + z * pred.sigma


def prediction_interval(model: GprModel, x_star, alpha: float):
    """Two-sided ``1 - alpha`` prediction interval for ``V_max`` at ``x_star``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    z = normal_inv_cdf(1.0 - alpha / 2.0)
    pred = predict(model, x_star)
    half = z * pred.sigma
    return pred.mu - half, pred.mu + half


def gp_risk_index(model: GprModel, x_star, v_limit: float = 1.05):
    """Probability that ``V_max`` exceeds ``v_limit`` at ``x_star``.

    With zero predictive spread the risk degenerates to the indicator
    ``mu > v_limit``; a warning is issued in that case.
    """
    if not v_limit > 0:
        raise ValueError("v_limit must be positive")
    pred = predict(model, x_star)
    mu, sd = np.asarray(pred.mu, dtype=float), np.asarray(pred.sigma, dtype=float)
    zero = sd == 0
    if np.any(zero):
        warnings.warn("zero predictive spread; risk reported as a 0/1 indicator", RuntimeWarning)
    with np.errstate(divide="ignore", invalid="ignore"):
        risk = 1.0 - normal_cdf((v_limit - mu) / np.where(zero, 1.0, sd))
    risk = np.where(zero, (mu > v_limit).astype(float), risk)
    return float(risk) if np.ndim(x_star) == 0 else risk


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def model_to_dict(model: GprModel) -> dict:
    h = model.hyper
    return {
        "kernel": "squared_exponential",
        "lambda_sq": h.lambda_sq,
        "tau_sq": h.tau_sq,
        "noise_var": h.noise_var,
        "center_m": model.center_m,
        "train_x": model.train_x.tolist(),
        "train_v_max": (model.train_y + model.center_m).tolist(),
    }


def model_from_dict(d: dict) -> GprModel:
    try:
        hyper = GprHyperparams(float(d["lambda_sq"]), float(d["tau_sq"]), float(d["noise_var"]))
        x = np.asarray(d["train_x"], dtype=float)
        y = np.asarray(d["train_v_max"], dtype=float)
        m = float(d["center_m"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed GPR model: {exc}") from None
    if d.get("kernel", "squared_exponential") != "squared_exponential":
        raise ValueError(f"unsupported kernel {d.get('kernel')!r}")
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("malformed GPR model: train_x and train_v_max differ in shape")
    return condition_gpr(x, y, hyper, center_m=m)


# --------------------------------------------------------------------------
# scikit-learn estimator
# --------------------------------------------------------------------------

class GaussianProcessVoltage(RegressorMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_gpr_xy`.

    Parameters
    ----------
    n_restarts : int, default 8
        Latin-hypercube starting points for the likelihood search.
    random_state : int, default 0
    max_train : int, default 2000
        Upper bound on training-set size (exact GP cost grows as n**3).
    v_limit : float, default 1.05
        Voltage limit used by :meth:`risk`.

    Attributes
    ----------
    model_ : GprModel
    hyperparams_ : GprHyperparams
    """

    def __init__(self, n_restarts=8, random_state=0, max_train=2000, v_limit=1.05):
        self.n_restarts = n_restarts
        self.random_state = random_state
        self.max_train = max_train
        self.v_limit = v_limit

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if X.shape[1] != 1:
            raise ValueError("GaussianProcessVoltage takes a single input feature")
        opts = FitOptions(n_restarts=self.n_restarts, seed=self.random_state, max_train=self.max_train)
        self.model_ = fit_gpr_xy(X[:, 0], y, opts)
        self.hyperparams_ = self.model_.hyper
        self.n_features_in_ = 1
        return self

    def predict(self, X, return_std=False):
        check_is_fitted(self, "model_")
        X = check_array(X)
        pred = predict(self.model_, X[:, 0])
        return (pred.mu, pred.sigma) if return_std else pred.mu

    def risk(self, X):
        """Over-voltage probability at each row of ``X``."""
        check_is_fitted(self, "model_")
        X = check_array(X)
        return gp_risk_index(self.model_, X[:, 0], self.v_limit)
