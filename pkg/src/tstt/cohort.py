"""Long-format analytic data: one row per person and enrollment window.

Each record carries the social group ``G``, the observed exposure (``spo2``),
true saturation (``sao2``, always an allowable covariate), the remaining
allowable and non-allowable covariates, the binary outcome within the
follow-up horizon and the (duration, event) pair for time-to-event analysis.

Contents:
    - CovariateSchema / Covariate: declared covariate names, types and roles
    - Cohort / Record: the validated analytic dataset
    - load_cohort(), write_cohort(): delimited text I/O
    - assign_windows(), apply_eligibility(): build records from raw pairs
    - restrict_common_support(): drop windows missing a group
    - describe(): measurement-error and occult-hypoxemia summaries
"""
from __future__ import annotations

import json
import logging
import math
import operator
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_HOURS = 12.0
DEFAULT_TAU = 1440.0
DEFAULT_PAIRING_MINUTES = 10.0
OCCULT_SAO2_BELOW = 88.0
OCCULT_SPO2_AT_LEAST = 92.0

RESERVED = ("person_id", "window", "timestamp", "group", "standard_flag", "spo2", "sao2",
            "outcome", "duration", "event")
MISSING_TOKENS = frozenset({"", "na", "nan", "null", "none", "."})
# absolute slack when comparing durations to the horizon
_TIME_EPS = 1e-9


@dataclass(frozen=True)
class Covariate:
    name: str
    type: str = "numeric"
    role: str = "allowable"

    def __post_init__(self):
        if self.type not in ("numeric", "categorical"):
            raise ConfigError(f"covariate {self.name!r}: type must be numeric or categorical, got {self.type!r}")
        if self.role not in ("allowable", "nonallowable"):
            raise ConfigError(f"covariate {self.name!r}: role must be allowable or nonallowable, got {self.role!r}")
        if self.name in RESERVED:
            raise ConfigError(f"covariate name {self.name!r} is reserved")


@dataclass(frozen=True)
class CovariateSchema:
    """Declared covariates. ``sao2`` is implicitly the first allowable."""

    covariates: tuple[Covariate, ...] = ()

    def __post_init__(self):
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate covariate names in schema: {names}")

    @classmethod
    def from_dict(cls, spec: Mapping) -> "CovariateSchema":
        try:
            items = spec["covariates"]
            return cls(tuple(Covariate(**item) for item in items))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"invalid covariate schema: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "CovariateSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {"covariates": [{"name": c.name, "type": c.type, "role": c.role} for c in self.covariates]}

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.covariates]

    @property
    def allowables(self) -> list[str]:
        return ["sao2"] + [c.name for c in self.covariates if c.role == "allowable"]

    @property
    def nonallowables(self) -> list[str]:
        return [c.name for c in self.covariates if c.role == "nonallowable"]

    @property
    def categorical(self) -> list[str]:
        return [c.name for c in self.covariates if c.type == "categorical"]

    def is_categorical(self, name: str) -> bool:
        return name in self.categorical

    def with_covariate(self, covariate: Covariate) -> "CovariateSchema":
        return CovariateSchema(self.covariates + (covariate,))


@dataclass(frozen=True)
class Record:
    """One person-window row."""

    person_id: object
    window: int
    group: int
    standard_flag: bool
    sao2: float
    spo2: float
    allowables: Mapping[str, object]
    nonallowables: Mapping[str, object]
    outcome: int
    duration: float
    event: bool


@dataclass(frozen=True)
class Cohort:
    """Validated analytic cohort backed by a pandas frame.

    Treat ``data`` as read-only; every operation in this package returns a
    new cohort rather than mutating one.
    """

    data: pd.DataFrame
    schema: CovariateSchema
    window_hours: float = DEFAULT_WINDOW_HOURS
    standard_group: int = 1
    tau: float = DEFAULT_TAU
    n_dropped: int = 0
    dropped_windows: tuple[int, ...] = ()

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, schema: CovariateSchema, *, window_hours=DEFAULT_WINDOW_HOURS,
                   standard_group=1, tau=DEFAULT_TAU, n_dropped=0, dropped_windows=()) -> "Cohort":
        """Coerce column types, derive ``standard_flag`` and check invariants."""
        if window_hours <= 0:
            raise ConfigError("window_hours must be positive")
        if standard_group not in (0, 1):
            raise ConfigError(f"standard_group must be 0 or 1, got {standard_group!r}")
        columns = ["person_id", "window", "group", "sao2", "spo2", *schema.names, "outcome", "duration", "event"]
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise DataError(f"cohort frame is missing columns {missing}")
        df = frame.loc[:, columns].copy()
        df["person_id"] = df["person_id"].astype(str)
        df["window"] = df["window"].astype(np.int64)
        df["group"] = df["group"].astype(np.int64)
        for col in ("sao2", "spo2", "duration"):
            df[col] = df[col].astype(float)
        df["outcome"] = df["outcome"].astype(np.int64)
        df["event"] = df["event"].astype(bool)
        for cov in schema.covariates:
            if cov.type == "numeric":
                df[cov.name] = df[cov.name].astype(float)
            else:
                df[cov.name] = df[cov.name].astype(str)
        df.insert(3, "standard_flag", df["group"].to_numpy() == standard_group)
        df = df.reset_index(drop=True)
        _check_records(df, schema, tau)
        return cls(df, schema, float(window_hours), int(standard_group), float(tau), int(n_dropped),
                   tuple(int(k) for k in dropped_windows))

    def __len__(self):
        return len(self.data)

    def records(self) -> Iterator[Record]:
        allow = [c for c in self.schema.allowables if c != "sao2"]
        nonallow = self.schema.nonallowables
        cols = list(self.data.columns)
        for row in self.data.itertuples(index=False, name=None):
            r = dict(zip(cols, row))
            yield Record(r["person_id"], int(r["window"]), int(r["group"]), bool(r["standard_flag"]),
                         float(r["sao2"]), float(r["spo2"]), {c: r[c] for c in allow},
                         {c: r[c] for c in nonallow}, int(r["outcome"]), float(r["duration"]), bool(r["event"]))

    @property
    def windows(self) -> np.ndarray:
        return np.unique(self.data["window"].to_numpy())

    def subset(self, mask) -> "Cohort":
        return replace(self, data=self.data.loc[np.asarray(mask, dtype=bool)].reset_index(drop=True))

    def group_frame(self, group: int) -> pd.DataFrame:
        return self.data.loc[self.data["group"].to_numpy() == group].reset_index(drop=True)

    def standard_frame(self) -> pd.DataFrame:
        return self.data.loc[self.data["standard_flag"].to_numpy()].reset_index(drop=True)

    def with_frame(self, frame: pd.DataFrame) -> "Cohort":
        """New cohort with the same settings around a replacement frame."""
        return Cohort.from_frame(frame, self.schema, window_hours=self.window_hours,
                                 standard_group=self.standard_group, tau=self.tau)

    def with_schema(self, schema: CovariateSchema) -> "Cohort":
        return Cohort.from_frame(self.data, schema, window_hours=self.window_hours,
                                 standard_group=self.standard_group, tau=self.tau,
                                 n_dropped=self.n_dropped, dropped_windows=self.dropped_windows)


def _check_records(df: pd.DataFrame, schema: CovariateSchema, tau: float):
    if len(df) == 0:
        raise DataError("cohort is empty")
    if not np.isin(df["group"].to_numpy(), (0, 1)).all():
        raise DataError("group must be 0 or 1")
    if (df["window"].to_numpy() < 0).any():
        raise DataError("window indices must be non-negative")
    for col in ("sao2", "spo2"):
        v = df[col].to_numpy()
        if not ((v >= 0) & (v <= 100)).all():
            raise DataError(f"{col} must lie in [0, 100]")
    dur = df["duration"].to_numpy()
    if not ((dur > 0) & (dur <= tau + _TIME_EPS)).all():
        raise DataError(f"duration must lie in (0, tau={tau:g}]")
    event = df["event"].to_numpy()
    outcome = df["outcome"].to_numpy()
    if not np.isin(outcome, (0, 1)).all():
        raise DataError("outcome must be 0 or 1")
    if (outcome.astype(bool) != event).any():
        raise DataError("outcome must equal 1 exactly when an event occurs within tau")
    if (np.abs(dur[~event] - tau) > 1e-6).any():
        raise DataError("censored records must have duration equal to tau (administrative censoring only)")
    if df.duplicated(["person_id", "window"]).any():
        dup = df.loc[df.duplicated(["person_id", "window"]), ["person_id", "window"]].iloc[0]
        raise DataError(f"person {dup['person_id']!r} enrolls twice in window {dup['window']}")
    for cov in schema.covariates:
        if cov.type == "numeric" and not np.isfinite(df[cov.name].to_numpy()).all():
            raise DataError(f"covariate {cov.name!r} has non-finite values")


# ---------------------------------------------------------------------------
# delimited text I/O
# ---------------------------------------------------------------------------

def _is_missing(token: str) -> bool:
    return token.strip().lower() in MISSING_TOKENS


def _parse_float(token, line, col):
    try:
        v = float(token)
    except ValueError:
        raise DataError(f"line {line}: column {col!r}: cannot parse {token!r} as a number") from None
    if not math.isfinite(v):
        raise DataError(f"line {line}: column {col!r}: non-finite value {token!r}")
    return v


def _parse_binary(token, line, col, allow_bool=False):
    t = token.strip().lower()
    if t in ("0", "1"):
        return int(t)
    if allow_bool and t in ("true", "false"):
        return int(t == "true")
    expected = "{0,1,true,false}" if allow_bool else "{0,1}"
    raise DataError(f"line {line}: column {col!r}: expected one of {expected}, got {token!r}")


def _parse_int(token, line, col):
    try:
        v = int(token.strip())
    except ValueError:
        raise DataError(f"line {line}: column {col!r}: expected a non-negative integer, got {token!r}") from None
    if v < 0:
        raise DataError(f"line {line}: column {col!r}: expected a non-negative integer, got {token!r}")
    return v


def load_cohort(path, schema: CovariateSchema, *, window_hours=DEFAULT_WINDOW_HOURS, standard_group=1,
                tau=DEFAULT_TAU) -> Cohort:
    """Read a comma-separated cohort file and apply complete-case filtering.

    The file needs a header with ``person_id``, either ``window`` or
    ``timestamp``, ``group``, ``spo2``, ``sao2``, every schema covariate,
    ``outcome``, ``duration`` and ``event``. Unknown extra columns are ignored.
    Rows with a missing exposure, covariate or outcome field are dropped and
    counted in ``Cohort.n_dropped``. Error messages cite 1-based file lines
    (the header is line 1).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"cohort file not found: {path}")
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    raw.columns = [c.strip() for c in raw.columns]

    time_col = "window" if "window" in raw.columns else "timestamp"
    required = ["person_id", time_col, "group", "spo2", "sao2", *schema.names, "outcome", "duration", "event"]
    missing = [c for c in required if c not in raw.columns]
    if missing:
        raise DataError(f"{path}: header does not match schema; missing columns {missing}")

    droppable = ["spo2", "sao2", *schema.names, "outcome", "duration", "event"]
    miss = np.zeros(len(raw), dtype=bool)
    for col in droppable:
        miss |= raw[col].map(_is_missing).to_numpy(dtype=bool)
    for col in ("person_id", time_col, "group"):
        bad = raw[col].map(_is_missing).to_numpy(dtype=bool)
        if bad.any():
            raise DataError(f"line {int(np.argmax(bad)) + 2}: required column {col!r} is empty")

    keep = np.flatnonzero(~miss)
    n_dropped = int(miss.sum())
    if n_dropped:
        logger.info("complete-case filter dropped %d of %d rows", n_dropped, len(raw))
    if len(keep) == 0:
        raise DataError(f"{path}: no complete rows remain after dropping {n_dropped} with missing fields")

    sub = raw.iloc[keep]
    lines = keep + 2
    out = {"person_id": sub["person_id"].str.strip().to_numpy()}
    parsers = {"group": lambda t, ln, c: _parse_binary(t, ln, c),
               "outcome": lambda t, ln, c: _parse_binary(t, ln, c),
               "event": lambda t, ln, c: _parse_binary(t, ln, c, allow_bool=True)}
    numeric = ["spo2", "sao2", "duration"] + [c.name for c in schema.covariates if c.type == "numeric"]
    for col in ["group", "outcome", "event", *numeric]:
        parse = parsers.get(col, _parse_float)
        out[col] = [parse(t, ln, col) for t, ln in zip(sub[col], lines)]
    for name in schema.categorical:
        out[name] = sub[name].str.strip().to_numpy()
    if time_col == "window":
        out["window"] = [_parse_int(t, ln, "window") for t, ln in zip(sub["window"], lines)]
    frame = pd.DataFrame(out)

    for col, lo, hi in (("spo2", 0, 100), ("sao2", 0, 100)):
        bad = ~frame[col].between(lo, hi).to_numpy()
        if bad.any():
            raise DataError(f"line {lines[np.argmax(bad)]}: column {col!r} outside [{lo}, {hi}]")
    bad = ~((frame["duration"] > 0) & (frame["duration"] <= tau + _TIME_EPS)).to_numpy()
    if bad.any():
        raise DataError(f"line {lines[np.argmax(bad)]}: duration outside (0, {tau:g}]")
    bad = (frame["outcome"] != frame["event"]).to_numpy()
    if bad.any():
        raise DataError(f"line {lines[np.argmax(bad)]}: outcome and event disagree")

    if time_col == "timestamp":
        frame["timestamp"] = _parse_timestamps(sub["timestamp"], lines)
        frame = assign_windows(frame, window_hours)
    return Cohort.from_frame(frame, schema, window_hours=window_hours, standard_group=standard_group,
                             tau=tau, n_dropped=n_dropped)


def _parse_timestamps(tokens: pd.Series, lines) -> pd.Series:
    numeric = pd.to_numeric(tokens, errors="coerce")
    if numeric.notna().all():
        return numeric.astype(float).reset_index(drop=True)
    parsed = pd.to_datetime(tokens, errors="coerce")
    if parsed.isna().any():
        i = int(np.argmax(parsed.isna().to_numpy()))
        raise DataError(f"line {lines[i]}: column 'timestamp': cannot parse {tokens.iloc[i]!r}")
    return parsed.reset_index(drop=True)


def write_cohort(cohort: Cohort, path, *, float_format="%.6f"):
    """Write ``cohort`` in the layout :func:`load_cohort` reads."""
    df = cohort.data.drop(columns=["standard_flag"]).copy()
    df["event"] = df["event"].astype(int)
    df.to_csv(path, index=False, float_format=float_format, lineterminator="\n")


# ---------------------------------------------------------------------------
# building records from raw measurement pairs
# ---------------------------------------------------------------------------

def _elapsed_hours(ts: pd.Series, origin) -> tuple[np.ndarray, object]:
    if pd.api.types.is_datetime64_any_dtype(ts):
        if origin is None:
            origin = ts.min().floor("h")
        return ((ts - pd.Timestamp(origin)) / pd.Timedelta(hours=1)).to_numpy(dtype=float), origin
    # numeric timestamps are already hours elapsed since the origin
    values = ts.to_numpy(dtype=float)
    if origin is None:
        origin = 0.0
    return values - float(origin), origin


def assign_windows(events: pd.DataFrame, window_hours=DEFAULT_WINDOW_HOURS, origin=None) -> pd.DataFrame:
    """Attach window index ``k = floor(elapsed_hours / window_hours)``.

    ``events`` needs ``person_id`` and ``timestamp``. Datetime timestamps are
    measured from ``origin`` (default: earliest timestamp floored to the
    hour); numeric timestamps are read as hours already elapsed from the
    origin. When a person has several events in one window only the
    earliest is kept. Output is sorted by person then time, so the result does
    not depend on input row order.
    """
    if window_hours <= 0:
        raise ConfigError("window_hours must be positive")
    if "person_id" not in events or "timestamp" not in events:
        raise DataError("events need person_id and timestamp columns")
    df = events.copy()
    if df.duplicated(["person_id", "timestamp"]).any():
        dup = df.loc[df.duplicated(["person_id", "timestamp"]), "person_id"].iloc[0]
        raise DataError(f"person {dup!r} has duplicate timestamps; cannot order events")
    hours, _ = _elapsed_hours(df["timestamp"], origin)
    if (hours < 0).any():
        raise DataError("timestamp precedes the window origin")
    df["window"] = np.floor(hours / window_hours + 1e-12).astype(np.int64)
    df = df.sort_values(["person_id", "timestamp"], kind="mergesort")
    df = df.drop_duplicates(["person_id", "window"], keep="first")
    return df.reset_index(drop=True)


_OPS = {">=": operator.ge, ">": operator.gt, "<=": operator.le, "<": operator.lt, "==": operator.eq,
        "!=": operator.ne}


def predicate_from_config(spec: Mapping) -> Callable[[pd.DataFrame], np.ndarray]:
    """Build an eligibility predicate from ``{"column", "op", "value"}``."""
    try:
        column, op, value = spec["column"], _OPS[spec["op"]], spec["value"]
    except KeyError as exc:
        raise ConfigError(f"invalid eligibility predicate {spec!r}") from exc

    def predicate(frame):
        return op(frame[column], value).to_numpy(dtype=bool)

    predicate.__name__ = f"{column}{spec['op']}{value}"
    return predicate


def pairing_delay_minutes(candidates: pd.DataFrame) -> np.ndarray:
    """Minutes from the SpO2 reading to the paired SaO2 draw (negative if before)."""
    t0, t1 = candidates["timestamp"], candidates["sao2_timestamp"]
    if pd.api.types.is_datetime64_any_dtype(t0):
        return ((t1 - t0) / pd.Timedelta(minutes=1)).to_numpy(dtype=float)
    return (t1.to_numpy(dtype=float) - t0.to_numpy(dtype=float)) * 60.0


def apply_eligibility(candidates: pd.DataFrame, schema: CovariateSchema, *,
                      pairing_window_minutes=DEFAULT_PAIRING_MINUTES,
                      predicates: Sequence[Callable[[pd.DataFrame], np.ndarray]] = (),
                      window_hours=DEFAULT_WINDOW_HOURS, origin=None, standard_group=1,
                      tau=DEFAULT_TAU) -> Cohort:
    """Keep candidates whose SaO2 follows the SpO2 reading within the pairing window.

    The delay must satisfy ``0 < delay <= pairing_window_minutes``. Extra
    predicates are applied conjunctively. If the candidates carry no
    ``window`` column, windows are assigned after filtering so that the
    earliest *eligible* event per person-window is enrolled.
    """
    delay = pairing_delay_minutes(candidates)
    mask = (delay > 0) & (delay <= pairing_window_minutes + 1e-9)
    for predicate in predicates:
        mask &= np.asarray(predicate(candidates), dtype=bool)
    kept = candidates.loc[mask]
    if len(kept) == 0:
        raise DataError("no candidate satisfies the eligibility criteria")
    if "window" not in kept.columns:
        kept = assign_windows(kept, window_hours, origin)
    return Cohort.from_frame(kept, schema, window_hours=window_hours, standard_group=standard_group, tau=tau)


def restrict_common_support(cohort: Cohort) -> Cohort:
    """Drop every window that lacks a record from either group."""
    df = cohort.data
    present = df.groupby("window")["group"].nunique()
    dropped = tuple(int(k) for k in present.index[present < 2])
    if len(dropped) == len(present):
        raise DataError("no window contains records from both groups")
    if dropped:
        logger.info("common-support restriction dropped windows %s", list(dropped))
    kept = df.loc[~df["window"].isin(dropped)].reset_index(drop=True)
    return replace(cohort, data=kept, dropped_windows=cohort.dropped_windows + dropped)


def describe(cohort: Cohort) -> dict:
    """Per-group measurement-error moments and occult-hypoxemia prevalence.

    Error is ``spo2 - sao2``; the SD uses ``ddof=1``. Occult hypoxemia is
    ``sao2 < 88`` while ``spo2 >= 92``.
    """
    df = cohort.data
    if len(df) == 0:
        raise DataError("cannot describe an empty cohort")

    def summarize(part: pd.DataFrame) -> dict:
        err = part["spo2"].to_numpy() - part["sao2"].to_numpy()
        occult = (part["sao2"].to_numpy() < OCCULT_SAO2_BELOW) & (part["spo2"].to_numpy() >= OCCULT_SPO2_AT_LEAST)
        n = len(part)
        return {
            "n_records": n,
            "n_persons": int(part["person_id"].nunique()),
            "error_mean": float(err.mean()) if n else None,
            "error_sd": float(err.std(ddof=1)) if n > 1 else None,
            "occult_hypoxemia_n": int(occult.sum()),
            "occult_hypoxemia_prevalence": float(occult.mean()) if n else None,
            "outcome_rate": float(part["outcome"].mean()) if n else None,
        }

    return {
        "n_records": len(df),
        "n_dropped_incomplete": cohort.n_dropped,
        "dropped_windows": list(cohort.dropped_windows),
        "groups": {str(g): summarize(df.loc[df["group"] == g]) for g in (0, 1)},
        "overall": summarize(df),
    }



def overlap_flags(cohort: Cohort, bins: int = 10) -> list[dict]:
    """Allowable strata seen in the standard population but not in the other group.

    Checked per window and per allowable covariate. Numeric allowables are cut
    at the pooled ``bins``-quantiles (deciles by default); categorical ones use
    their levels.
    """
    if bins < 1:
        raise ConfigError("bins must be at least 1")
    df = cohort.data
    std = df["standard_flag"].to_numpy()
    flags = []
    for name in cohort.schema.allowables:
        values = df[name]
        if cohort.schema.is_categorical(name):
            strata = values.astype(str).to_numpy()
        else:
            x = values.to_numpy(dtype=float)
            edges = np.unique(np.quantile(x, np.linspace(0, 1, bins + 1)[1:-1]))
            strata = np.searchsorted(edges, x, side="right")
        table = pd.DataFrame({"window": df["window"].to_numpy(), "stratum": strata, "std": std})
        seen = table.groupby(["window", "stratum", "std"]).size().unstack("std", fill_value=0)
        for col in (False, True):
            if col not in seen.columns:
                seen[col] = 0
        missing = seen.loc[(seen[True] > 0) & (seen[False] == 0)]
        for (window, stratum), row in missing.iterrows():
            flags.append({"window": int(window), "covariate": name,
                          "stratum": str(stratum) if cohort.schema.is_categorical(name) else int(stratum),
                          "n_standard": int(row[True])})
    return flags
