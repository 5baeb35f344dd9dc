"""Binary over-voltage labels and a univariate logistic model of their probability."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

__all__ = [
    "LogitFitError",
    "DegenerateLabelsError",
    "LogitModel",
    "LabeledSample",
    "label_violations",
    "fit_logit",
    "fit_logit_xy",
    "logit_violation_prob",
    "score_gradient",
    "LogisticViolation",
]


class LogitFitError(RuntimeError):
    """IRLS did not converge."""


class DegenerateLabelsError(ValueError):
    """All labels are identical, so the slope is not identifiable."""


@dataclass(frozen=True)
class LogitModel:
    b0: float
    b1: float

    def __post_init__(self):
        if not (math.isfinite(self.b0) and math.isfinite(self.b1)):
            raise ValueError("logit coefficients must be finite")


@dataclass(frozen=True)
class LabeledSample:
    x: float
    violated: int

    def __post_init__(self):
        if self.violated not in (0, 1):
            raise ValueError("violated must be 0 or 1")


def label_violations(samples: Sequence, v_limit: float = 1.05) -> list[LabeledSample]:
    """Label each converged sample 1 if ``v_max > v_limit`` (strictly), else 0."""
    return [
        LabeledSample(float(s.x), int(s.v_max > v_limit))
        for s in samples
        if getattr(s, "converged", True)
    ]


def score_gradient(model: LogitModel, x, y, ridge: float = 1e-6) -> np.ndarray:
    """Gradient of the penalized log-likelihood at ``model``."""
    x = np.asarray(x, dtype=float)
    r = np.asarray(y, dtype=float) - expit(model.b0 + model.b1 * x)
    return np.array([r.sum() - ridge * model.b0, (r * x).sum() - ridge * model.b1])


def fit_logit_xy(x, y, ridge: float = 1e-6, tol: float = 1e-8, max_iter: int = 500) -> LogitModel:
    """IRLS (Newton) fit of ``P(y=1) = sigmoid(b0 + b1*x)`` with an L2 penalty.

    The penalty keeps coefficients finite under perfect separation. Steps are
    halved until the penalized log-likelihood does not decrease; iteration
    stops once the step is below ``tol`` in max-norm.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if len(x) != len(y):
        raise ValueError("x and y must have equal length")
    if len(x) < 10:
        raise ValueError(f"need at least 10 labeled samples, got {len(x)}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    if y.min() == y.max():
        raise DegenerateLabelsError(f"all labels equal {int(y[0])}; the logit slope is not identifiable")
    X = np.column_stack([np.ones_like(x), x])
    b = np.zeros(2)

    def objective(b):
        eta = X @ b
        # log-likelihood written with logaddexp for stability at large |eta|
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)) - 0.5 * ridge * b @ b)

    f = objective(b)
    for _ in range(max_iter):
        p = expit(X @ b)
        w = p * (1.0 - p)
        grad = X.T @ (y - p) - ridge * b
        hess = (X * w[:, None]).T @ X + ridge * np.eye(2)
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while True:
            cand = b + t * step
            fc = objective(cand)
            if fc >= f or t < 1e-12:
                break
            t *= 0.5
        b, f = cand, fc
        if np.max(np.abs(t * step)) < tol:
            return LogitModel(float(b[0]), float(b[1]))
    raise LogitFitError(f"IRLS did not converge in {max_iter} iterations")


def fit_logit(data: Sequence[LabeledSample], ridge: float = 1e-6, tol: float = 1e-8) -> LogitModel:
    x = np.array([d.x for d in data], dtype=float)
    y = np.array([d.violated for d in data], dtype=float)
    return fit_logit_xy(x, y, ridge=ridge, tol=tol)


def logit_violation_prob(model: LogitModel, x_star):
    out = expit(model.b0 + model.b1 * np.asarray(x_star, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


class LogisticViolation(ClassifierMixin, BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_logit_xy`.

    Parameters
    ----------
    ridge : float, default 1e-6
        L2 penalty on both coefficients.
    tol : float, default 1e-8
        Convergence threshold on the IRLS step.

    Attributes
    ----------
    model_ : LogitModel
    coef_ : ndarray of shape (1, 1)
    intercept_ : ndarray of shape (1,)
    classes_ : ndarray, always ``[0, 1]``
    """

    def __init__(self, ridge=1e-6, tol=1e-8):
        self.ridge = ridge
        self.tol = tol

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if X.shape[1] != 1:
            raise ValueError("LogisticViolation takes a single input feature")
        labels = unique_labels(y)
        if not set(labels.tolist()) <= {0, 1}:
            raise ValueError("labels must be 0 or 1")
        self.model_ = fit_logit_xy(X[:, 0], y, ridge=self.ridge, tol=self.tol)
        self.coef_ = np.array([[self.model_.b1]])
        self.intercept_ = np.array([self.model_.b0])
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = 1
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        p = logit_violation_prob(self.model_, X[:, 0])
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] > 0.5).astype(int)
