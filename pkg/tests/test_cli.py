import csv
import io
import json

import numpy as np
import pytest

from tstt.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_OK, RunConfig, cmd_estimate, main)
from tstt.cohort import write_cohort
from tstt.intervention import role_swap
from tstt.synthgen import SynthConfig, generate_cohort, synth_schema

SYNTH = {"n_per_group": 300, "n_windows": 3, "seed": 5}
RUN = {"synth": SYNTH, "mc_draws": 10, "bootstrap_B": 20, "bootstrap_seed": 11, "seed": 3}


def write_config(path, spec):
    path.write_text(json.dumps(spec))
    return str(path)


@pytest.fixture(scope="module")
def baseline(tmp_path_factory):
    root = tmp_path_factory.mktemp("base")
    cfg = write_config(root / "run.json", RUN)
    assert main(["estimate", "--config", cfg, "--out", str(root / "out")]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def file_run(tmp_path_factory):
    """A synthetic cohort on disk with a pure-noise column available as an extra non-allowable."""
    root = tmp_path_factory.mktemp("file")
    cohort = generate_cohort(SynthConfig(**SYNTH))
    write_cohort(cohort, root / "cohort.csv")
    rows = list(csv.DictReader(open(root / "cohort.csv")))
    rng = np.random.default_rng(0)
    with open(root / "cohort.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[*rows[0], "noise"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "noise": f"{rng.normal():.6f}"})
    spec = {**{k: v for k, v in RUN.items() if k != "synth"}, "cohort": "cohort.csv",
            "schema": synth_schema().to_dict(), "bootstrap_B": 40,
            "sensitivity": {"extra_nonallowable": {"name": "noise", "type": "numeric"}}}
    return root, write_config(root / "run.json", spec)


def read_csv(path):
    return list(csv.DictReader(open(path)))


def test_malformed_and_missing_config(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["validate", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["validate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    cfg = write_config(tmp_path / "unknown.json", {**RUN, "colour": 1})
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_usage_errors_exit_2(tmp_path):
    cfg = write_config(tmp_path / "run.json", RUN)
    with pytest.raises(SystemExit) as exc:
        main(["sensitivity", "--config", cfg, "--out", str(tmp_path), "--variant", "bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--config", cfg, "--out", str(tmp_path), "--threads", "0"])
    assert exc.value.code == 2


def test_data_error_exits_3(tmp_path):
    (tmp_path / "c.csv").write_text("person_id,window\n1,2\n")
    cfg = write_config(tmp_path / "run.json", {"cohort": "c.csv", "schema": synth_schema().to_dict()})
    assert main(["validate", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_DATA
    report = json.loads((tmp_path / "o" / "validation.json").read_text())
    assert report["status"] == "error"


def test_validate_and_describe(tmp_path):
    cfg = write_config(tmp_path / "run.json", RUN)
    assert main(["validate", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    report = json.loads((tmp_path / "validation.json").read_text())
    assert report["status"] == "ok"
    assert report["overlap"]["n_flags"] == 0
    assert report["common_support"]["dropped_windows"] == []
    assert main(["describe", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    desc = json.loads((tmp_path / "descriptives.json").read_text())
    assert set(desc["groups"]) == {"0", "1"}


def test_estimate_is_deterministic_across_runs_and_threads(baseline, tmp_path):
    cfg = str(baseline / "run.json")
    for threads in ("1", "8"):
        out = tmp_path / threads
        assert main(["estimate", "--config", cfg, "--out", str(out), "--threads", threads]) == EXIT_OK
        for name in ("estimates.csv", "estimates.json"):
            assert (out / name).read_bytes() == (baseline / "out" / name).read_bytes()


def test_seed_flag_overrides_config(baseline, tmp_path):
    cfg = str(baseline / "run.json")
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path), "--seed", "3"]) == EXIT_OK
    assert (tmp_path / "estimates.json").read_bytes() == (baseline / "out" / "estimates.json").read_bytes()
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path), "--seed", "4"]) == EXIT_OK
    assert json.loads((tmp_path / "estimates.json").read_text())["seed"] == 4


def test_output_identities(baseline):
    result = json.loads((baseline / "out" / "estimates.json").read_text())
    sim = [r for r in result["rows"] if r["section"] == "simulated"]
    for kind in ("binary", "rmst"):
        rows = {r["arm"]: r for r in sim if r["outcome_kind"] == kind}
        assert rows["z0"]["is_reference"] and rows["z0"]["tau_effect"] == 0.0
        for r in rows.values():
            assert r["psi"] == r["mu_g1"] - r["mu_g0"]
            assert r["tau_effect"] == r["psi"] - rows["z0"]["psi"]
            lo, hi = r["psi_ci"]
            assert lo <= hi
    recs = read_csv(baseline / "out" / "estimates.csv")
    tenths = lambda text: round(float(text) * 10)
    for rec in recs:
        assert tenths(rec["disparity"]) == tenths(rec["mean_g1"]) - tenths(rec["mean_g0"])
        if rec["label"].startswith("Reference"):
            assert rec["intervention_effect"] == "Reference"
    for outcome in ("% Treated", "RMST, minutes"):
        sim = [r for r in recs if r["outcome"] == outcome and r["section"] == "simulated"]
        for r in sim[1:]:
            assert tenths(r["intervention_effect"]) == tenths(r["disparity"]) - tenths(sim[0]["disparity"])
        for r, row in zip(sim, [r for r in result["rows"] if r["section"] == "simulated"
                                and r["outcome_kind"] == ("binary" if outcome == "% Treated" else "rmst")]):
            scale = 100 if outcome == "% Treated" else 1
            assert abs(float(r["disparity"]) - row["psi"] * scale) <= 0.1 + 1e-9


def test_csv_layout(baseline):
    recs = read_csv(baseline / "out" / "estimates.csv")
    assert [r["section"] for r in recs].count("observed") == 4
    assert [r["section"] for r in recs].count("simulated") == 18
    assert {r["outcome"] for r in recs} == {"% Treated", "RMST, minutes"}
    binary = [r for r in recs if r["outcome"] == "% Treated"]
    assert all(0 <= float(r["mean_g0"]) <= 100 for r in binary)
    rmst = [r for r in recs if r["outcome"] == "RMST, minutes"]
    assert all(0 <= float(r["mean_g0"]) <= 1440 for r in rmst)
    for r in recs:
        for col in ("mean_g0", "disparity"):
            assert r[col] == f"{float(r[col]):.1f}"


def test_double_role_swap_matches_baseline(baseline, tmp_path):
    config = RunConfig.load(baseline / "run.json")
    result = cmd_estimate(config, tmp_path, seed=3, transform=lambda f: role_swap(role_swap(f)))
    assert (tmp_path / "estimates.csv").read_bytes() == (baseline / "out" / "estimates.csv").read_bytes()
    assert result["rows"] == json.loads((baseline / "out" / "estimates.json").read_text())["rows"]


def test_sensitivity_variants(baseline, tmp_path):
    cfg = str(baseline / "run.json")
    assert main(["sensitivity", "--config", cfg, "--out", str(tmp_path / "s"), "--variant", "swap-roles"]) == EXIT_OK
    swapped = json.loads((tmp_path / "s" / "estimates.json").read_text())
    assert swapped["variant"] == "swap-roles"
    assert main(["sensitivity", "--config", cfg, "--out", str(tmp_path / "a"),
                 "--variant", "add-nonallowable"]) == EXIT_OK


def test_noise_nonallowable_barely_moves_estimates(file_run, tmp_path):
    root, cfg = file_run
    assert main(["estimate", "--config", cfg, "--out", str(tmp_path / "base")]) == EXIT_OK
    assert main(["sensitivity", "--config", cfg, "--out", str(tmp_path / "noise"),
                 "--variant", "add-nonallowable"]) == EXIT_OK
    base = json.loads((tmp_path / "base" / "estimates.json").read_text())["rows"]
    noisy = json.loads((tmp_path / "noise" / "estimates.json").read_text())["rows"]
    for a, b in zip(base, noisy):
        assert a["label"] == b["label"]
        for q in ("mu_g0", "mu_g1", "psi"):
            lo, hi = a[f"{q}_ci"]
            se = (hi - lo) / (2 * 1.96)
            assert abs(a[q] - b[q]) <= 3 * se + 1e-12
