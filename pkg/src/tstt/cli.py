"""Batch command line: ``tstt {validate,describe,estimate,sensitivity}``.

Every command reads one JSON run configuration and writes its results into
``--out``. Outputs are deterministic functions of the inputs and ``--seed``;
``--threads`` only changes wall-clock time.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from . import __version__
from .bootstrap import BootstrapPlan, bootstrap_ci
from .cohort import (DEFAULT_TAU, DEFAULT_WINDOW_HOURS, Cohort, Covariate, CovariateSchema, describe, load_cohort,
                     overlap_flags, restrict_common_support)
from .errors import ConfigError, DataError, NumericalError, TsttError
from .gcomp import OUTCOME_KINDS, GcompOptions, GcompPipeline, estimate_effects, observed_disparity
from .intervention import ArmSet
from .synthgen import SynthConfig, generate_cohort

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
VARIANTS = ("add-nonallowable", "swap-roles")
OUTCOME_LABELS = {"binary": "% Treated", "rmst": "RMST, minutes"}
# binary means are reported as percentages
OUTCOME_SCALE = {"binary": 100.0, "rmst": 1.0}
CSV_COLUMNS = ("section", "outcome", "label", "arm", "delta_mu", "delta_sigma",
               "mean_g0", "mean_g0_lower", "mean_g0_upper",
               "mean_g1", "mean_g1_lower", "mean_g1_upper",
               "disparity", "disparity_lower", "disparity_upper",
               "intervention_effect", "intervention_effect_lower", "intervention_effect_upper")
QUANTITIES = (("mu_g0", "mean_g0"), ("mu_g1", "mean_g1"), ("psi", "disparity"),
              ("tau_effect", "intervention_effect"))

_KEYS = {"cohort", "synth", "schema", "include_adi", "standard_group", "window_hours", "tau", "arms",
         "outcome_kinds", "mc_draws", "k_form", "k_bins", "bootstrap_B", "bootstrap_seed", "ci_level",
         "common_support", "overlap_bins", "sensitivity", "seed"}


@dataclass(frozen=True)
class RunConfig:
    """Parsed run configuration; see the README for the JSON layout."""

    cohort_path: Path | None = None
    synth: SynthConfig | None = None
    schema: CovariateSchema | None = None
    include_adi: bool = False
    standard_group: int = 1
    window_hours: float = DEFAULT_WINDOW_HOURS
    tau: float = DEFAULT_TAU
    arms: ArmSet = field(default_factory=lambda: ArmSet.from_config(None))
    outcome_kinds: tuple[str, ...] = OUTCOME_KINDS
    mc_draws: int = 100
    k_form: str = "linear"
    k_bins: int = 4
    bootstrap_B: int = 500
    bootstrap_seed: int | None = None
    ci_level: float = 0.95
    common_support: bool = True
    overlap_bins: int = 10
    extra_nonallowable: Covariate = Covariate("adi", "numeric", "nonallowable")
    seed: int = 0

    @classmethod
    def from_dict(cls, spec: Mapping, base_dir: Path | str = ".") -> "RunConfig":
        if not isinstance(spec, Mapping):
            raise ConfigError("run configuration must be a JSON object")
        unknown = set(spec) - _KEYS
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        if ("cohort" in spec) == ("synth" in spec):
            raise ConfigError("give exactly one of 'cohort' (a file path) or 'synth' (a generator config)")
        try:
            standard_group = int(spec.get("standard_group", 1))
            window_hours = float(spec.get("window_hours", DEFAULT_WINDOW_HOURS))
            tau = float(spec.get("tau", DEFAULT_TAU))
            if standard_group not in (0, 1):
                raise ConfigError(f"standard_group must be one of the declared groups 0/1, got {standard_group}")
            kinds = spec.get("outcome_kinds", list(OUTCOME_KINDS))
            kinds = (kinds,) if isinstance(kinds, str) else tuple(kinds)
            bad = [k for k in kinds if k not in OUTCOME_KINDS]
            if bad or not kinds:
                raise ConfigError(f"outcome_kinds must be a non-empty subset of {OUTCOME_KINDS}")
            cohort_path = synth = schema = None
            if "cohort" in spec:
                cohort_path = Path(base_dir) / spec["cohort"]
                if "schema" not in spec:
                    raise ConfigError("a cohort file needs a 'schema'")
            else:
                synth = SynthConfig.from_dict({**spec["synth"], "standard_group": standard_group,
                                               "window_hours": window_hours, "tau": tau})
            if "schema" in spec:
                if synth is not None:
                    raise ConfigError("synthetic cohorts fix their own schema; drop 'schema'")
                schema = CovariateSchema.from_dict(spec["schema"])
            extra = dict(spec.get("sensitivity", {}).get("extra_nonallowable", {"name": "adi", "type": "numeric"}))
            extra_cov = Covariate(extra["name"], extra.get("type", "numeric"), "nonallowable")
            out = cls(cohort_path=cohort_path, synth=synth, schema=schema,
                      include_adi=bool(spec.get("include_adi", False)), standard_group=standard_group,
                      window_hours=window_hours, tau=tau, arms=ArmSet.from_config(spec.get("arms")),
                      outcome_kinds=kinds, mc_draws=int(spec.get("mc_draws", 100)),
                      k_form=str(spec.get("k_form", "linear")), k_bins=int(spec.get("k_bins", 4)),
                      bootstrap_B=int(spec.get("bootstrap_B", 500)),
                      bootstrap_seed=None if spec.get("bootstrap_seed") is None else int(spec["bootstrap_seed"]),
                      ci_level=float(spec.get("ci_level", 0.95)),
                      common_support=bool(spec.get("common_support", True)),
                      overlap_bins=int(spec.get("overlap_bins", 10)),
                      extra_nonallowable=extra_cov, seed=int(spec.get("seed", 0)))
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ConfigError(f"invalid run configuration: {exc}") from exc
        out.options("binary")  # validates M, tau and the k form up front
        if out.bootstrap_B < 0:
            raise ConfigError("bootstrap_B must be >= 0 (0 disables intervals)")
        if not 0 < out.ci_level < 1:
            raise ConfigError("ci_level must lie in (0, 1)")
        if out.k_form not in ("linear", "piecewise"):
            raise ConfigError(f"k_form must be 'linear' or 'piecewise', got {out.k_form!r}")
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, encoding="utf-8") as fh:
                spec = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON in {path}: {exc}") from exc
        return cls.from_dict(spec, path.parent)

    def options(self, kind: str, *, seed: int | None = None, swap_roles=False) -> GcompOptions:
        return GcompOptions(kind, self.mc_draws, self.tau, self.k_form, self.k_bins, swap_roles,
                            self.seed if seed is None else seed)


def load_run_cohort(config: RunConfig, *, extra_nonallowable=False, restrict: bool | None = None) -> Cohort:
    """Cohort named by the config, optionally with the extra non-allowable."""
    if config.synth is not None:
        if extra_nonallowable and config.extra_nonallowable.name != "adi":
            raise ConfigError("synthetic cohorts only carry 'adi' as an extra non-allowable")
        cohort = generate_cohort(config.synth, include_adi=config.include_adi or extra_nonallowable)
    else:
        schema = config.schema
        if extra_nonallowable:
            if config.extra_nonallowable.name in schema.names:
                raise ConfigError(f"{config.extra_nonallowable.name!r} is already in the schema")
            schema = schema.with_covariate(config.extra_nonallowable)
        cohort = load_cohort(config.cohort_path, schema, window_hours=config.window_hours,
                             standard_group=config.standard_group, tau=config.tau)
    if restrict if restrict is not None else config.common_support:
        cohort = restrict_common_support(cohort)
    return cohort


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------

def _estimator(config: RunConfig, seed: int, swap_roles: bool, transform) -> Callable[[Cohort], dict]:
    def estimate(cohort: Cohort) -> dict:
        out = {}
        for kind in config.outcome_kinds:
            for mode, standardized in (("unstandardized", False), ("standardized", True)):
                est = observed_disparity(cohort, kind, standardized, k_form=config.k_form, k_bins=config.k_bins,
                                         tau=config.tau)
                for q, v in est.values().items():
                    out[f"{kind}/observed/{mode}/{q}"] = v
            options = config.options(kind, seed=seed, swap_roles=swap_roles)
            pipe = GcompPipeline.fit(cohort, options, transform=transform)
            for est in estimate_effects(cohort, config.arms, options, pipeline=pipe):
                for q, v in est.values().items():
                    out[f"{kind}/arm/{est.arm}/{q}"] = v
        return out
    return estimate


def run_estimates(config: RunConfig, cohort: Cohort, *, seed: int, threads: int = 1, swap_roles=False,
                  transform=None, variant: str | None = None) -> dict:
    """Point estimates, bootstrap intervals and the table rows for one run."""
    estimator = _estimator(config, seed, swap_roles, transform)
    n_failed = 0
    if config.bootstrap_B > 0:
        boot_seed = seed if config.bootstrap_seed is None else config.bootstrap_seed
        plan = BootstrapPlan(config.bootstrap_B, seed=boot_seed)
        res = bootstrap_ci(estimator, cohort, plan, config.ci_level, threads=threads)
        point = dict(zip(res.names, (float(v) for v in res.estimate)))
        ci = {n: (float(lo), float(hi)) for n, lo, hi in zip(res.names, res.lower, res.upper)}
        n_failed = res.n_failed
    else:
        boot_seed = None
        point = {k: float(v) for k, v in estimator(cohort).items()}
        ci = {}

    rows = []
    for kind in config.outcome_kinds:
        for mode, label in (("unstandardized", "Before standardization"), ("standardized", "After standardization")):
            key = f"{kind}/observed/{mode}"
            rows.append(_row("observed", kind, label, mode, None, point, ci, key, reference=False))
        for arm in config.arms:
            ref = arm.name == config.arms.reference_name
            label = f"delta_mu={arm.delta_mu:g}, delta_sigma={arm.delta_sigma:g}"
            if ref:
                label = f"Reference ({label})"
            rows.append(_row("simulated", kind, label, arm.name, arm, point, ci, f"{kind}/arm/{arm.name}",
                             reference=ref))
    return {
        "variant": variant or "main",
        "seed": int(seed),
        "outcome_kinds": list(config.outcome_kinds),
        "ci_level": config.ci_level,
        "bootstrap": {"B": config.bootstrap_B, "seed": boot_seed, "n_failed": int(n_failed)},
        "n_records": len(cohort),
        "n_persons": {str(g): int(cohort.group_frame(g)["person_id"].nunique()) for g in (0, 1)},
        "standard_group": cohort.standard_group,
        "tau": config.tau,
        "rows": rows,
    }


def _row(section, kind, label, name, arm, point, ci, key, reference) -> dict:
    row = {"section": section, "outcome_kind": kind, "label": label, "arm": name,
           "delta_mu": None if arm is None else arm.delta_mu,
           "delta_sigma": None if arm is None else arm.delta_sigma, "is_reference": reference}
    for q, _ in QUANTITIES:
        row[q] = point.get(f"{key}/{q}")
        bounds = ci.get(f"{key}/{q}")
        row[f"{q}_ci"] = None if bounds is None else list(bounds)
    if section == "observed":
        row.pop("tau_effect")
        row.pop("tau_effect_ci")
    return row


def _fmt(value) -> str:
    return "" if value is None else f"{value:.1f}"


def _tenths(text: str) -> int:
    return int(round(float(text) * 10))


def _from_tenths(n: int) -> str:
    sign = "-" if n < 0 else ""
    return f"{sign}{abs(n) // 10}.{abs(n) % 10}"


def _printed_gap(row) -> int:
    """Disparity in tenths of a display unit, from the printed group means."""
    scale = OUTCOME_SCALE[row["outcome_kind"]]
    return _tenths(_fmt(row["mu_g1"] * scale)) - _tenths(_fmt(row["mu_g0"] * scale))


def table_rows(result: dict) -> list[dict]:
    """Rows of ``estimates.csv``: percentages for binary, minutes for RMST, one decimal.

    Point estimates of the disparity and intervention effect are derived from
    the rounded group means, so ``disparity == mean_g1 - mean_g0`` and
    ``intervention_effect == disparity - reference disparity`` hold exactly
    in the printed table. The JSON output keeps full precision.
    """
    out = []
    reference = {row["outcome_kind"]: _printed_gap(row) for row in result["rows"]
                 if row["is_reference"] and row["mu_g0"] is not None}
    for row in result["rows"]:
        scale = OUTCOME_SCALE[row["outcome_kind"]]
        rec = {"section": row["section"], "outcome": OUTCOME_LABELS[row["outcome_kind"]], "label": row["label"],
               "arm": row["arm"], "delta_mu": "" if row["delta_mu"] is None else f"{row['delta_mu']:g}",
               "delta_sigma": "" if row["delta_sigma"] is None else f"{row['delta_sigma']:g}"}
        for q, col in QUANTITIES:
            value = row.get(q)
            bounds = row.get(f"{q}_ci")
            rec[col] = _fmt(None if value is None else value * scale)
            rec[f"{col}_lower"] = _fmt(None if bounds is None else bounds[0] * scale)
            rec[f"{col}_upper"] = _fmt(None if bounds is None else bounds[1] * scale)
        if rec["mean_g0"] and rec["mean_g1"]:
            disparity = _printed_gap(row)
            rec["disparity"] = _from_tenths(disparity)
            if row["section"] == "simulated" and row["outcome_kind"] in reference and rec["intervention_effect"]:
                rec["intervention_effect"] = _from_tenths(disparity - reference[row["outcome_kind"]])
        if row["is_reference"]:
            rec["intervention_effect"] = "Reference"
            rec["intervention_effect_lower"] = rec["intervention_effect_upper"] = ""
        out.append(rec)
    return out


def render_csv(result: dict) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(table_rows(result))
    return buf.getvalue()


def render_summary(result: dict) -> str:
    """Plain-text tables in the layout ``estimate (lower, upper)``."""
    def cell(rec, col):
        if rec[col] in ("", "Reference"):
            return rec[col]
        if rec[f"{col}_lower"] == "":
            return rec[col]
        return f"{rec[col]} ({rec[f'{col}_lower']}, {rec[f'{col}_upper']})"

    lines = [f"variant: {result['variant']}  seed: {result['seed']}  records: {result['n_records']}"]
    recs = table_rows(result)
    for section, title in (("observed", "Observed disparity"), ("simulated", "Simulated disparities")):
        cols = ["mean_g0", "mean_g1", "disparity"] + (["intervention_effect"] if section == "simulated" else [])
        lines.append("")
        lines.append(title)
        lines.append("\t".join(["", "Group 0", "Group 1", "Disparity"]
                               + (["Intervention effect"] if section == "simulated" else [])))
        outcome = None
        for rec in recs:
            if rec["section"] != section:
                continue
            if rec["outcome"] != outcome:
                outcome = rec["outcome"]
                lines.append(outcome)
            lines.append("\t".join([rec["label"], *(cell(rec, c) for c in cols)]))
    return "\n".join(lines) + "\n"


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n", encoding="utf-8")


def _prepare_out(out) -> Path:
    out = Path(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_validate(config: RunConfig, out, *, seed: int = 0, threads: int = 1) -> dict:
    """Schema checks, common-support restriction and allowable overlap."""
    out = _prepare_out(out)
    try:
        loaded = load_run_cohort(config, restrict=False)
        restricted = restrict_common_support(loaded)
    except DataError as exc:
        _write_json(out / "validation.json", {"status": "error", "error": str(exc)})
        raise
    flags = overlap_flags(restricted, config.overlap_bins)
    report = {
        "status": "ok",
        "n_records_loaded": len(loaded),
        "n_dropped_incomplete": loaded.n_dropped,
        "schema": restricted.schema.to_dict(),
        "standard_group": restricted.standard_group,
        "common_support": {"dropped_windows": list(restricted.dropped_windows),
                           "n_records_after": len(restricted)},
        "overlap": {"bins": config.overlap_bins, "n_flags": len(flags), "flags": flags},
    }
    _write_json(out / "validation.json", report)
    print(f"{len(loaded)} records loaded, {loaded.n_dropped} dropped as incomplete; "
          f"windows dropped for common support: {list(restricted.dropped_windows)}; overlap flags: {len(flags)}")
    return report


def cmd_describe(config: RunConfig, out, *, seed: int = 0, threads: int = 1) -> dict:
    """Measurement-error and occult-hypoxemia summaries per group."""
    out = _prepare_out(out)
    cohort = load_run_cohort(config)
    desc = describe(cohort)
    _write_json(out / "descriptives.json", desc)
    print("group\trecords\tpersons\terror mean\terror SD\toccult hypoxemia (%)")
    for g in ("0", "1", "overall"):
        d = desc["overall"] if g == "overall" else desc["groups"][g]
        prev = d["occult_hypoxemia_prevalence"]
        sd = d["error_sd"]
        print(f"{g}\t{d['n_records']}\t{d['n_persons']}\t{d['error_mean']:.2f}\t"
              f"{'' if sd is None else f'{sd:.2f}'}\t{'' if prev is None else f'{100 * prev:.1f}'}")
    return desc


def cmd_estimate(config: RunConfig, out, *, seed: int = 0, threads: int = 1, variant: str | None = None,
                 transform=None) -> dict:
    """Observed and simulated disparities with bootstrap intervals."""
    if variant not in (None, *VARIANTS):
        raise ConfigError(f"unknown sensitivity variant {variant!r}; choose from {VARIANTS}")
    out = _prepare_out(out)
    cohort = load_run_cohort(config, extra_nonallowable=variant == "add-nonallowable")
    result = run_estimates(config, cohort, seed=seed, threads=threads, swap_roles=variant == "swap-roles",
                           transform=transform, variant=variant)
    (out / "estimates.csv").write_text(render_csv(result), encoding="utf-8")
    _write_json(out / "estimates.json", result)
    sys.stdout.write(render_summary(result))
    return result


def cmd_sensitivity(config: RunConfig, out, variant: str, *, seed: int = 0, threads: int = 1) -> dict:
    """Re-run the estimation with an extra non-allowable or swapped SpO2/SaO2 roles."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown sensitivity variant {variant!r}; choose from {VARIANTS}")
    return cmd_estimate(config, out, seed=seed, threads=threads, variant=variant)


def _u64(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tstt", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("validate", "check the cohort and write validation.json"),
                            ("describe", "write descriptives.json"),
                            ("estimate", "write estimates.csv and estimates.json"),
                            ("sensitivity", "estimate under a sensitivity variant")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration (JSON)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=_u64, default=None, help="master seed (overrides the config's 'seed')")
        p.add_argument("--threads", type=_positive, default=1, help="worker threads for bootstrap replicates")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "sensitivity":
            p.add_argument("--variant", required=True, choices=VARIANTS)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = RunConfig.load(args.config)
        seed = config.seed if args.seed is None else args.seed
        kw = {"seed": seed, "threads": args.threads}
        if args.command == "validate":
            cmd_validate(config, args.out, **kw)
        elif args.command == "describe":
            cmd_describe(config, args.out, **kw)
        elif args.command == "estimate":
            cmd_estimate(config, args.out, **kw)
        else:
            cmd_sensitivity(config, args.out, args.variant, **kw)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TsttError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK
