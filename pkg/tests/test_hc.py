import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pvhc import hc
from pvhc.gpr import GprHyperparams, condition_gpr, upper_band
from pvhc.hc import HcQuery
from pvhc.logit import LogitModel, logit_violation_prob


@pytest.fixture(scope="module")
def noisy_model():
    rng = np.random.default_rng(0)
    x = rng.uniform(0, 1, 300)
    y = 1.03 + 0.04 * np.maximum(x - 0.2, 0) ** 1.5 + rng.normal(0, 0.004, 300)
    return condition_gpr(x, y, GprHyperparams(2e-4, 0.3, 1.6e-5))


def test_grid():
    g = hc.hc_grid(2001)
    assert len(g) == 2001 and g[0] > 0 and g[-1] < 1
    np.testing.assert_allclose(np.diff(g), 1 / 2002)


def test_unconstrained_low_voltage():
    x = np.linspace(0, 1, 40)
    model = condition_gpr(x, 0.98 + 0.01 * x, GprHyperparams(1e-4, 0.5, 1e-6))
    r = hc.solve_gp_wocc_hc(model, HcQuery("gp_mean"))
    assert r.hc == hc.hc_grid(2001)[-1]
    assert any(d.startswith("unconstrained") for d in r.diagnostics)


def test_infeasible_everywhere():
    x = np.linspace(0, 1, 40)
    model = condition_gpr(x, 1.1 + 0.01 * x, GprHyperparams(1e-4, 0.5, 1e-6))
    r = hc.solve_gp_wocc_hc(model, HcQuery("gp_mean"))
    assert r.hc == 0.0 and any(d.startswith("infeasible") for d in r.diagnostics)


def _linear_model():
    xg = np.linspace(0, 1, 60)
    return condition_gpr(xg, 1.05 + 0.1 * (xg - 0.6), GprHyperparams(1e-20, 4.0, 1e-30))


def test_synthetic_crossing():
    r = hc.solve_gp_wocc_hc(_linear_model(), HcQuery("gp_mean"), peak_load_mw=3.715)
    assert r.hc == pytest.approx(0.6, abs=1 / 2002)
    assert r.hc_mw == pytest.approx(r.hc * 3.715)
    assert r.binding_value <= 1.05 and r.feasible_set_contiguous


def test_degenerate_interval():
    model = _linear_model()
    lower, upper = hc.solve_gp_hc_bounds(model, HcQuery("gp_bounds", alpha=0.05))
    mean = hc.solve_gp_wocc_hc(model, HcQuery("gp_mean"))
    assert lower.hc == upper.hc == mean.hc


def test_bounds_ordering_and_nesting(noisy_model):
    mean = hc.solve_gp_wocc_hc(noisy_model, HcQuery("gp_mean")).hc
    lo5, up5 = hc.solve_gp_hc_bounds(noisy_model, HcQuery("gp_bounds", alpha=0.05))
    lo50, up50 = hc.solve_gp_hc_bounds(noisy_model, HcQuery("gp_bounds", alpha=0.5))
    assert lo5.hc <= lo50.hc <= mean <= up50.hc <= up5.hc
    assert lo5.bound == "lower" and up5.bound == "upper"


@pytest.mark.parametrize("beta", [0.01, 0.025, 0.05, 0.1, 0.25])
def test_cc_equals_lower_bound(noisy_model, beta):
    cc = hc.solve_gp_cc_hc(noisy_model, HcQuery("gp_cc", beta=beta))
    lower, _ = hc.solve_gp_hc_bounds(noisy_model, HcQuery("gp_bounds", alpha=2 * beta))
    assert cc.hc == lower.hc and cc.binding_value == lower.binding_value


def test_cc_half_equals_mean(noisy_model):
    assert hc.solve_gp_cc_hc(noisy_model, HcQuery("gp_cc", beta=0.5)).hc == hc.solve_gp_wocc_hc(
        noisy_model, HcQuery("gp_mean")).hc


@given(b1=st.floats(1e-3, 0.49), b2=st.floats(1e-3, 0.49))
def test_cc_monotone_in_beta(noisy_model, b1, b2):
    b1, b2 = sorted((b1, b2))
    mean = hc.solve_gp_wocc_hc(noisy_model, HcQuery("gp_mean", grid_points=301)).hc
    h1 = hc.solve_gp_cc_hc(noisy_model, HcQuery("gp_cc", beta=b1, grid_points=301)).hc
    h2 = hc.solve_gp_cc_hc(noisy_model, HcQuery("gp_cc", beta=b2, grid_points=301)).hc
    assert h1 <= h2 <= mean
    lm = LogitModel(-12.0, 20.0)
    assert hc.solve_logit_cc_hc(lm, HcQuery("logit_cc", beta=b1)).hc <= hc.solve_logit_cc_hc(
        lm, HcQuery("logit_cc", beta=b2)).hc


def test_logit_closed_form():
    q = HcQuery("logit_cc", beta=0.05)
    r = hc.solve_logit_cc_hc(LogitModel(-20.0, 25.0), q)
    assert r.hc == pytest.approx((math.log(1 / 19) + 20) / 25, abs=1e-12)
    assert r.hc == pytest.approx(0.682, abs=5e-4)
    assert logit_violation_prob(LogitModel(-20.0, 25.0), r.hc) == pytest.approx(0.05, abs=1e-10)


def test_logit_boundary_clamp():
    beta = 0.05
    b0 = -math.log(beta / (1 - beta))
    r = hc.solve_logit_cc_hc(LogitModel(b0, 3.0), HcQuery("logit_cc", beta=beta))
    assert r.hc == 0.0
    assert logit_violation_prob(LogitModel(b0, 3.0), r.hc) >= beta - 1e-12
    r = hc.solve_logit_cc_hc(LogitModel(-50.0, 3.0), HcQuery("logit_cc", beta=beta))
    assert r.hc == 1.0 and any(d.startswith("unconstrained") for d in r.diagnostics)


def test_logit_nonpositive_slope_grid():
    r = hc.solve_logit_cc_hc(LogitModel(-2.0, -1.0), HcQuery("logit_cc", beta=0.2))
    assert any("grid search" in d for d in r.diagnostics)
    assert r.hc == hc.hc_grid(2001)[-1]


def test_query_validation():
    with pytest.raises(ValueError):
        HcQuery("gp_cc")
    with pytest.raises(ValueError):
        HcQuery("gp_mean", beta=0.1)
    with pytest.raises(ValueError):
        HcQuery("gp_bounds", alpha=1.0)
    with pytest.raises(ValueError):
        HcQuery("bogus")


def test_run_query_dispatch(noisy_model):
    assert len(hc.run_query(HcQuery("gp_bounds", alpha=0.1), noisy_model, None)) == 2
    with pytest.raises(ValueError):
        hc.run_query(HcQuery("logit_cc", beta=0.1), noisy_model, None)


def test_risk_curve(noisy_model):
    curve = hc.compute_risk_curve(noisy_model, LogitModel(-10.0, 12.0), 101)
    assert len(curve.grid) == 101
    np.testing.assert_allclose(np.diff(curve.grid), 0.01)
    assert curve.gp_risk[90] > curve.gp_risk[20]
    buf = io.StringIO()
    hc.write_risk_curve_csv(hc.compute_risk_curve(noisy_model, None, 5), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "x,gp_risk,logit_risk" and len(lines) == 6 and lines[1].endswith(",")


def test_band_matches_constraint(noisy_model):
    grid = hc.hc_grid(101)
    r = hc.solve_gp_cc_hc(noisy_model, HcQuery("gp_cc", beta=0.1, grid_points=101))
    z = 1.2815515655446004
    band = upper_band(noisy_model, grid, z)
    assert r.binding_value == pytest.approx(band[grid == r.hc][0], abs=1e-12)
