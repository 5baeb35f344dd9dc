"""Probability primitives: Normal and Beta marginals, Gaussian copula sampling.

Random streams come from NumPy's counter-based ``Philox`` bit generator keyed
by a :class:`numpy.random.SeedSequence`, so a given ``(seed, key)`` pair yields
the same stream on every platform regardless of how work is scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "NormalParams",
    "BetaParams",
    "CopulaSpec",
    "make_rng",
    "normal_cdf",
    "normal_inv_cdf",
    "normal_ppf_clamped",
    "regularized_incomplete_beta",
    "beta_inv_cdf",
    "sample_gaussian_copula",
]

_TINY = 1e-300
_CF_EPS = 1e-16
_CF_MAX_TERMS = 400


@dataclass(frozen=True)
class NormalParams:
    mean: float = 0.5
    sd: float = 0.025

    def __post_init__(self):
        if not (self.sd > 0 and np.isfinite(self.sd)):
            raise ValueError(f"Normal sd must be positive, got {self.sd!r}")


@dataclass(frozen=True)
class BetaParams:
    alpha: float = 15.0
    beta_shape: float = 6.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta_shape > 0):
            raise ValueError(
                f"Beta shapes must be positive, got ({self.alpha!r}, {self.beta_shape!r})"
            )

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta_shape)


@dataclass(frozen=True)
class CopulaSpec:
    rho: float = 0.15

    def __post_init__(self):
        if not -1.0 < self.rho < 1.0:
            raise ValueError(f"copula correlation must lie in (-1, 1), got {self.rho!r}")


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox generator for the stream identified by ``seed`` and ``key``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def normal_cdf(z):
    """Standard normal CDF, elementwise."""
    return special.ndtr(z)


def _check_open_unit(p):
    p = np.asarray(p, dtype=float)
    if np.any(~((p > 0.0) & (p < 1.0))):
        raise ValueError("probability must lie in the open interval (0, 1)")
    return p


def normal_inv_cdf(p):
    """Standard normal quantile. Raises ``ValueError`` outside (0, 1)."""
    p_arr = _check_open_unit(p)
    out = special.ndtri(p_arr)
    return float(out) if np.ndim(p) == 0 else out


def normal_ppf_clamped(u, params: NormalParams, lo: float = 0.0, hi: float = 1.0):
    """Normal quantile mapped to ``params`` and clamped to ``[lo, hi]``."""
    x = params.mean + params.sd * special.ndtri(np.asarray(u, dtype=float))
    return np.clip(x, lo, hi)


def _betacf(x, a, b):
    # Modified Lentz evaluation of the incomplete-beta continued fraction.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 - qab * x / qap
    d = np.where(np.abs(d) < _TINY, _TINY, d)
    d = 1.0 / d
    h = d.copy()
    done = np.zeros(x.shape, dtype=bool)
    for m in range(1, _CF_MAX_TERMS + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        h = np.where(done, h, h * d * c)
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = np.where(np.abs(d) < _TINY, _TINY, d)
        c = 1.0 + aa / c
        c = np.where(np.abs(c) < _TINY, _TINY, c)
        d = 1.0 / d
        delta = d * c
        h = np.where(done, h, h * delta)
        done |= np.abs(delta - 1.0) < _CF_EPS
        if done.all():
            break
    return h


def regularized_incomplete_beta(x, a: float, b: float):
    """Regularized incomplete beta function I_x(a, b), elementwise in ``x``.

    Continued fraction in the region where it converges fast, with the
    symmetry I_x(a, b) = 1 - I_{1-x}(b, a) elsewhere.
    """
    scalar = np.ndim(x) == 0
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any((x < 0) | (x > 1)):
        raise ValueError("incomplete beta argument must lie in [0, 1]")
    out = np.where(x >= 1.0, 1.0, 0.0)
    inner = (x > 0.0) & (x < 1.0)
    if inner.any():
        xi = x[inner]
        swap = xi >= (a + 1.0) / (a + b + 2.0)
        xs = np.where(swap, 1.0 - xi, xi)
        As = np.where(swap, b, a)
        Bs = np.where(swap, a, b)
        log_front = As * np.log(xs) + Bs * np.log1p(-xs) - special.betaln(As, Bs)
        val = np.exp(log_front) * _betacf(xs, As, Bs) / As
        out[inner] = np.where(swap, 1.0 - val, val)
    return float(out[0]) if scalar else out


def _beta_logpdf(x, a, b):
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - special.betaln(a, b)


def beta_inv_cdf(p, params: BetaParams, tol: float = 1e-15, max_iter: int = 200):
    """Beta quantile by safeguarded Newton iteration on I_x(a, b) = p.

    Each iterate keeps a bracket ``[lo, hi]``; Newton steps falling outside it
    are replaced by bisection.
    """
    scalar = np.ndim(p) == 0
    p = np.atleast_1d(_check_open_unit(p))
    a, b = float(params.alpha), float(params.beta_shape)
    lo = np.zeros_like(p)
    hi = np.ones_like(p)
    # Normal approximation on the mean/sd as a starting point.
    mean = a / (a + b)
    sd = np.sqrt(a * b / ((a + b) ** 2 * (a + b + 1.0)))
    x = np.clip(mean + sd * special.ndtri(p), 1e-6, 1 - 1e-6)
    active = np.ones(p.shape, dtype=bool)
    for _ in range(max_iter):
        xa = x[active]
        f = regularized_incomplete_beta(xa, a, b) - p[active]
        lo_a, hi_a = lo[active], hi[active]
        lo_a = np.where(f < 0, xa, lo_a)
        hi_a = np.where(f > 0, xa, hi_a)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            dens = np.exp(_beta_logpdf(xa, a, b))
            step = f / dens
            x_new = xa - step
        bad = ~np.isfinite(x_new) | (x_new <= lo_a) | (x_new >= hi_a)
        x_new = np.where(bad, 0.5 * (lo_a + hi_a), x_new)
        conv = (np.abs(x_new - xa) <= tol * np.maximum(1.0, np.abs(xa))) | (f == 0)
        conv |= (hi_a - lo_a) <= 4 * np.finfo(float).eps
        x[active] = np.where(f == 0, xa, x_new)
        lo[active], hi[active] = lo_a, hi_a
        idx = np.flatnonzero(active)
        active[idx[conv]] = False
        if not active.any():
            break
    return float(x[0]) if scalar else x


def sample_gaussian_copula(spec: CopulaSpec, n: int, seed: int, *key: int) -> np.ndarray:
    """Draw ``n`` uniform pairs coupled by a bivariate Gaussian copula.

    Independent standard normals are correlated through the Cholesky factor of
    the 2x2 correlation matrix, then mapped to (0, 1) by the normal CDF.

    Returns
    -------
    ndarray of shape (n, 2)
    """
    if n < 1:
        raise ValueError("need at least one copula sample")
    rng = make_rng(seed, *key)
    e = rng.standard_normal((n, 2))
    chol = np.linalg.cholesky(np.array([[1.0, spec.rho], [spec.rho, 1.0]]))
    z = e @ chol.T
    u = special.ndtr(z)
    # Keep strictly inside (0, 1) so quantile maps stay finite.
    return np.clip(u, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
