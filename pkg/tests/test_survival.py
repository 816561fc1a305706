import numpy as np
import pandas as pd
import pytest

from oracles import random_instance, zoom_grid_max
from tstt.errors import DataError, MonotoneLikelihoodError, RankDeficiencyError
from tstt.survival import (SurvivalCurve, baseline_curve, cox_score, fit_cox, kaplan_meier, nelson_aalen,
                           partial_log_likelihood, predict_survival, rmst, rmst_at_eta, rmst_evaluator)


@pytest.mark.parametrize("seed", range(100))
def test_breslow_at_zero_equals_nelson_aalen(seed):
    rng = np.random.default_rng(seed)
    _, t, event = random_instance(rng, int(rng.integers(5, 60)), 1)
    if not event.any():
        event[0] = True
    fit = fit_cox(None, t, event)
    times, H = nelson_aalen(t, event)
    np.testing.assert_array_equal(fit.event_times, times)
    np.testing.assert_array_equal(fit.baseline_hazard["cumulative"].to_numpy(), H)


@pytest.mark.parametrize("seed", range(30))
def test_coefficients_match_grid_search(seed):
    rng = np.random.default_rng(1000 + seed)
    p = 1 + seed % 2
    n = int(rng.integers(12, 21))
    X, t, event = random_instance(rng, n, p, ties=seed % 3 == 0)
    try:
        fit = fit_cox(X, t, event)
    except MonotoneLikelihoodError:
        pytest.skip("monotone likelihood draw")
    best = zoom_grid_max(lambda b: partial_log_likelihood(X, t, event, b), p)
    np.testing.assert_allclose(fit.coefficients.to_numpy(), best, atol=1e-4)
    assert fit.log_likelihood == pytest.approx(partial_log_likelihood(X, t, event, fit.coefficients), abs=1e-9)


def test_score_vanishes_at_optimum():
    rng = np.random.default_rng(5)
    X, t, event = random_instance(rng, 400, 3)
    fit = fit_cox(pd.DataFrame(X, columns=["a", "b", "c"]), t, event)
    assert np.max(np.abs(cox_score(fit, X, t, event))) < 1e-6
    assert fit.columns == ["a", "b", "c"]


def test_monotone_likelihood_detected():
    # the covariate orders every event before every later time
    x = np.arange(10, dtype=float)
    t = 100.0 - 10 * x
    with pytest.raises(MonotoneLikelihoodError):
        fit_cox(x[:, None], t, np.ones(10, bool))


def test_rank_deficient_design():
    x = np.arange(10.0)
    with pytest.raises(RankDeficiencyError):
        fit_cox(np.column_stack([x, 2 * x]), x + 1, np.ones(10, bool))
    with pytest.raises(RankDeficiencyError):
        fit_cox(np.ones((10, 1)), x + 1, np.ones(10, bool))


def test_predict_survival_scales_baseline():
    rng = np.random.default_rng(2)
    X, t, event = random_instance(rng, 200, 1)
    fit = fit_cox(pd.DataFrame({"x": X[:, 0]}), t, event)
    curve = predict_survival(fit, {"x": 0.7})
    base = baseline_curve(fit)
    np.testing.assert_allclose(curve.survival, base.survival ** np.exp(0.7 * fit.coefficients["x"]))
    with pytest.raises(DataError):
        predict_survival(fit, {"y": 1.0})


def test_rmst_hand_cases_are_exact():
    assert rmst(SurvivalCurve([0.0], [1.0]), 1440) == 1440.0
    assert rmst(SurvivalCurve([0.0], [0.0]), 1440) == 0.0
    assert rmst(SurvivalCurve([0.0, 720.0], [1.0, 0.5]), 1440) == 1080.0


def test_rmst_ignores_steps_after_tau():
    curve = SurvivalCurve([0.0, 100.0, 2000.0], [1.0, 0.5, 0.1])
    assert rmst(curve, 1440) == 100 + 0.5 * 1340
    assert rmst(curve, 50) == 50


def test_kaplan_meier_rmst_equals_mean_restricted_time_without_censoring():
    rng = np.random.default_rng(9)
    t = rng.exponential(800, 300)
    event = t <= 1440
    t = np.minimum(t, 1440)
    km = kaplan_meier(t, event)
    assert rmst(km, 1440) == pytest.approx(np.minimum(t, 1440).mean(), rel=1e-12)


def test_rmst_evaluator_matches_direct_sum():
    rng = np.random.default_rng(11)
    X, t, event = random_instance(rng, 300, 1, ties=False)
    fit = fit_cox(X * 3, t * 5, event)
    eta = rng.uniform(-2, 2, 500)
    spline = rmst_evaluator(fit, eta.min(), eta.max(), 1440)
    np.testing.assert_allclose(spline(eta), rmst_at_eta(fit, eta, 1440), atol=1e-6)
    direct = [rmst(baseline_curve(fit, e), 1440) for e in eta[:20]]
    np.testing.assert_allclose(rmst_at_eta(fit, eta[:20], 1440), direct, rtol=1e-12)


def test_survival_curve_validation():
    with pytest.raises(DataError):
        SurvivalCurve([1.0, 2.0], [1.0, 0.5])
    with pytest.raises(DataError):
        SurvivalCurve([0.0, 2.0], [0.5, 0.6])
    curve = SurvivalCurve([0.0, 10.0], [1.0, 0.4])
    np.testing.assert_array_equal(curve([0, 9.99, 10, 50]), [1, 1, 0.4, 0.4])
