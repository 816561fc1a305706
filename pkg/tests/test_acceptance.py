"""End-to-end acceptance checks, one group of tests per criterion.

A summary line per criterion is printed at the end of the run.
"""
import csv
import io
import json
import time

import numpy as np
import pytest

from conftest import make_frame
from oracles import newton_logistic, random_instance, zoom_grid_max
from tstt.bootstrap import BootstrapPlan, bootstrap_ci, resample_indices
from tstt.cli import CSV_COLUMNS, RunConfig, cmd_estimate
from tstt.cohort import Cohort, Covariate, CovariateSchema, restrict_common_support
from tstt.errors import MonotoneLikelihoodError, SeparationError
from tstt.gcomp import GcompOptions, estimate_effects, observed_disparity
from tstt.glm import fit_glm, score
from tstt.intervention import standard_arm_set
from tstt.survival import SurvivalCurve, fit_cox, nelson_aalen, partial_log_likelihood, rmst
from tstt.synthgen import SynthConfig, generate_cohort, oracle_truth

ARMS = standard_arm_set()
N_ORACLE = 4_000_000


def criterion(number, title):
    return pytest.mark.criterion(number, title)


@pytest.fixture(scope="module")
def big():
    """Default generator at 50,000 persons, its oracle truth and the fitted effects."""
    config = SynthConfig()
    cohort = restrict_common_support(generate_cohort(config))
    truth = oracle_truth(config, ARMS, n_oracle=N_ORACLE)
    fits, seconds = {}, {}
    for kind in ("binary", "rmst"):
        start = time.perf_counter()
        fits[kind] = {e.arm: e for e in estimate_effects(cohort, ARMS, GcompOptions(kind, seed=1))}
        seconds[kind] = time.perf_counter() - start
    return config, cohort, truth, fits, seconds


@criterion(1, "oracle recovery, % treated")
def test_binary_oracle_recovery(big):
    config, cohort, truth, fits, seconds = big
    assert cohort.data["person_id"].nunique() == 50_000
    for arm in ARMS.names:
        t = truth.row("binary", arm)
        assert abs(fits["binary"][arm].psi - t["psi"]) < 0.01, arm
        assert abs(fits["binary"][arm].tau_effect - t["tau_effect"]) < 0.01, arm
    assert seconds["binary"] < 300


@criterion(2, "oracle recovery, RMST")
def test_rmst_oracle_recovery(big):
    _, _, truth, fits, _ = big
    for arm in ARMS.names:
        assert abs(fits["rmst"][arm].tau_effect - truth.row("rmst", arm)["tau_effect"]) < 10, arm


@criterion(3, "reference-arm effect is exactly zero")
def test_reference_effect_exact(big):
    _, cohort, _, fits, _ = big
    for kind in ("binary", "rmst"):
        assert fits[kind]["z0"].tau_effect == 0.0
    small = restrict_common_support(generate_cohort(SynthConfig(n_per_group=500, n_windows=5, seed=9)))
    for seed in (0, 1, 2**63 + 5):
        for kind in ("binary", "rmst"):
            est = estimate_effects(small, ARMS, GcompOptions(kind, mc_draws=20, seed=seed))
            assert est[0].is_reference and est[0].tau_effect == 0.0


@criterion(4, "standardization removes a disparity carried by an allowable")
def test_standardization_nullifies():
    # only age drives treatment, and age differs by group
    config = SynthConfig(coef_spo2=0.0, coef_sao2=0.0, coef_resp=0.0, coef_smoking=0.0, coef_window=0.0,
                         age_mean=(55.0, 65.0), coef_age=0.04)
    cohort = restrict_common_support(generate_cohort(config))
    assert cohort.data["person_id"].nunique() == 50_000
    assert abs(observed_disparity(cohort, "binary", False).psi) > 0.05
    assert abs(observed_disparity(cohort, "binary", True).psi) < 0.01


@criterion(5, "logistic IRLS correctness")
def test_glm_closed_forms():
    from scipy.special import logit
    y = np.r_[np.ones(4), np.zeros(6)]
    assert abs(fit_glm(np.ones((10, 1)), y).coefficients.iloc[0] - logit(0.4)) < 1e-6
    x = np.r_[np.zeros(100), np.ones(60)]
    y = np.r_[np.ones(30), np.zeros(70), np.ones(45), np.zeros(15)]
    X = np.column_stack([np.ones_like(x), x])
    fit = fit_glm(X, y)
    np.testing.assert_allclose(fit.coefficients, [np.log(30 / 70), np.log(3 / (30 / 70))], atol=1e-6)
    assert np.max(np.abs(score(fit, X, y))) < 1e-6


@criterion(5, "logistic IRLS correctness")
def test_glm_newton_oracle():
    from scipy.special import expit
    checked = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n, p = rng.integers(30, 80), rng.integers(1, 4)
        X = np.column_stack([np.ones(n), rng.normal(size=(n, p))])
        y = (rng.random(n) < expit(X @ rng.normal(scale=0.7, size=p + 1))).astype(float)
        try:
            fit = fit_glm(X, y)
        except SeparationError:
            continue
        np.testing.assert_allclose(fit.coefficients.to_numpy(), newton_logistic(X, y), atol=1e-6)
        assert np.max(np.abs(score(fit, X, y))) < 1e-6
        checked += 1
        if checked == 100:
            break
    assert checked == 100


@criterion(6, "Cox partial likelihood and Breslow baseline")
def test_breslow_equals_nelson_aalen():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        _, t, event = random_instance(rng, int(rng.integers(5, 60)), 1)
        event[0] = True
        fit = fit_cox(None, t, event)
        times, H = nelson_aalen(t, event)
        np.testing.assert_array_equal(fit.event_times, times)
        np.testing.assert_array_equal(fit.baseline_hazard["cumulative"].to_numpy(), H)


@criterion(6, "Cox partial likelihood and Breslow baseline")
def test_cox_matches_grid_search():
    checked = 0
    for seed in range(40):
        rng = np.random.default_rng(5000 + seed)
        X, t, event = random_instance(rng, int(rng.integers(12, 21)), 1 + seed % 2, ties=seed % 3 == 0)
        try:
            fit = fit_cox(X, t, event)
        except MonotoneLikelihoodError:
            continue
        best = zoom_grid_max(lambda b: partial_log_likelihood(X, t, event, b), X.shape[1])
        np.testing.assert_allclose(fit.coefficients.to_numpy(), best, atol=1e-4)
        checked += 1
    assert checked >= 20


@criterion(7, "RMST of step functions is exact")
def test_rmst_exact():
    assert rmst(SurvivalCurve([0.0], [1.0]), 1440) == 1440.0
    assert rmst(SurvivalCurve([0.0], [0.0]), 1440) == 0.0
    assert rmst(SurvivalCurve([0.0, 720.0], [1.0, 0.5]), 1440) == 1080.0


def _cluster_cohort(rng, n_per_stratum=40):
    """Persons with 1-3 records each; ``age`` plays the role of the measured value, mean 1."""
    rows = []
    for g in (0, 1):
        for i in range(n_per_stratum):
            person = rng.normal()
            for k in range(int(rng.integers(1, 4))):
                rows.append({"person_id": f"{g}-{i}", "window": k, "group": g, "sao2": 90.0, "spo2": 92.0,
                             "age": 1.0 + person + rng.normal(), "outcome": 0})
    return Cohort.from_frame(make_frame(rows), CovariateSchema((Covariate("age", "numeric", "allowable"),)))


@criterion(8, "balanced stratified bootstrap and its coverage")
def test_bootstrap_structure_and_coverage():
    rng = np.random.default_rng(2024)
    hits = 0
    for rep in range(200):
        cohort = _cluster_cohort(rng)
        plan = BootstrapPlan(500, seed=rep)
        res = resample_indices(plan, cohort)
        counts = res.multiplicity()
        assert (counts.sum(axis=0) == plan.B).all()
        for level in np.unique(res.strata):
            members = res.strata == level
            assert (counts[:, members].sum(axis=1) == members.sum()).all()
        lo, hi = bootstrap_ci(lambda c: {"mean": c.data["age"].mean()}, cohort, plan).interval("mean")
        hits += lo <= 1.0 <= hi
    assert 0.90 <= hits / 200 <= 0.98


@criterion(9, "direction of intervention effects matches the oracle")
def test_directional_fidelity(big):
    config, _, truth, fits, _ = big
    assert config.coef_spo2 < 0
    for arm in ARMS:
        est = fits["binary"][arm.name].tau_effect
        if arm.delta_mu == 2:
            assert est < 0, arm.name
        assert np.sign(est) == np.sign(truth.row("binary", arm.name)["tau_effect"]), arm.name


@pytest.fixture(scope="module")
def cli_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc")
    spec = {"synth": {"n_per_group": 300, "n_windows": 3, "seed": 21}, "mc_draws": 10, "bootstrap_B": 20}
    config = RunConfig.from_dict(spec)
    outs = []
    for i, threads in enumerate((1, 1, 8)):
        out = root / str(i)
        cmd_estimate(config, out, seed=77, threads=threads)
        outs.append(out)
    return outs


@criterion(10, "byte-identical outputs across runs and thread counts")
def test_determinism(cli_runs):
    first = cli_runs[0]
    for other in cli_runs[1:]:
        for name in ("estimates.csv", "estimates.json"):
            assert (other / name).read_bytes() == (first / name).read_bytes()


@criterion(11, "table layout of the emitted estimates")
def test_output_shape(cli_runs):
    text = (cli_runs[0] / "estimates.csv").read_text()
    reader = csv.DictReader(io.StringIO(text))
    assert tuple(reader.fieldnames) == CSV_COLUMNS
    for base in ("mean_g0", "mean_g1", "disparity", "intervention_effect"):
        assert {base, f"{base}_lower", f"{base}_upper"} <= set(reader.fieldnames)
    rows = list(reader)
    for outcome in ("% Treated", "RMST, minutes"):
        obs = [r for r in rows if r["outcome"] == outcome and r["section"] == "observed"]
        sim = [r for r in rows if r["outcome"] == outcome and r["section"] == "simulated"]
        assert [r["label"] for r in obs] == ["Before standardization", "After standardization"]
        assert all(r["intervention_effect"] == "" for r in obs)
        assert len(sim) == 9
        assert sim[0]["intervention_effect"] == "Reference" and sim[0]["label"].startswith("Reference")
        for r in obs + sim:
            for col in ("mean_g0", "mean_g1", "disparity"):
                float(r[col]), float(r[f"{col}_lower"]), float(r[f"{col}_upper"])
        tenths = lambda text: round(float(text) * 10)
        for r in obs + sim:
            assert tenths(r["disparity"]) == tenths(r["mean_g1"]) - tenths(r["mean_g0"])
        for r in sim[1:]:
            float(r["intervention_effect_lower"]), float(r["intervention_effect_upper"])
            assert tenths(r["intervention_effect"]) == tenths(r["disparity"]) - tenths(sim[0]["disparity"])
    result = json.loads((cli_runs[0] / "estimates.json").read_text())
    assert {"rows", "bootstrap", "seed", "variant"} <= set(result)
