import numpy as np
import pytest
from scipy.special import expit

from oracles import logit_grid_fit, synthetic_logit_data
from pvhc.logit import (
    DegenerateLabelsError,
    LabeledSample,
    LogisticViolation,
    LogitModel,
    fit_logit,
    fit_logit_xy,
    label_violations,
    logit_violation_prob,
    score_gradient,
)
from pvhc.scenarios import SampleRecord


def _rec(v, converged=True):
    return SampleRecord(0, 0, "none", 0.5, v, converged)


def test_labels_strict():
    assert label_violations([_rec(1.051)])[0].violated == 1
    assert label_violations([_rec(1.05)])[0].violated == 0
    assert label_violations([]) == []
    assert label_violations([_rec(float("nan"), False)]) == []


def test_recover_synthetic():
    x, y = synthetic_logit_data(0)
    m = fit_logit_xy(x, y)
    assert m.b0 == pytest.approx(-10, rel=0.10) and m.b1 == pytest.approx(20, rel=0.10)
    g0, g1 = logit_grid_fit(x, y)
    assert m.b0 == pytest.approx(g0, rel=1e-3) and m.b1 == pytest.approx(g1, rel=1e-3)


def test_no_signal():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, 5000)
    y = rng.integers(0, 2, 5000)
    assert abs(fit_logit_xy(x, y).b1) < 0.5


def test_score_gradient_vanishes():
    x, y = synthetic_logit_data(2)
    m = fit_logit_xy(x, y)
    assert np.linalg.norm(score_gradient(m, x, y)) < 1e-6


def test_perfect_separation_finite():
    x = np.linspace(0, 1, 40)
    y = (x > 0.5).astype(float)
    m = fit_logit_xy(x, y)
    assert np.isfinite(m.b0) and np.isfinite(m.b1) and m.b1 > 0
    boundary = -m.b0 / m.b1
    assert x[y == 0].max() < boundary < x[y == 1].min()


def test_degenerate_labels():
    data = [LabeledSample(float(i) / 20, 0) for i in range(20)]
    with pytest.raises(DegenerateLabelsError):
        fit_logit(data)
    with pytest.raises(ValueError):
        fit_logit(data[:5])


def test_violation_prob():
    m = LogitModel(-4.0, 8.0)
    assert logit_violation_prob(m, 0.5) == 0.5
    assert logit_violation_prob(LogitModel(0.3, 0.0), 7.0) == pytest.approx(expit(0.3))
    assert logit_violation_prob(m, 1e6) == 1.0
    p = logit_violation_prob(m, np.linspace(0, 1, 50))
    assert np.all(np.diff(p) > 0)


def test_estimator_api():
    x, y = synthetic_logit_data(3, n=500)
    clf = LogisticViolation().fit(x[:, None], y.astype(int))
    assert clf.coef_.shape == (1, 1) and list(clf.classes_) == [0, 1]
    proba = clf.predict_proba(x[:, None])
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert clf.score(x[:, None], y.astype(int)) > 0.8
