"""Balanced, stratified cluster bootstrap over persons with percentile intervals."""
from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
import pandas as pd

from .cohort import Cohort
from .errors import ConfigError, DataError, NumericalError, TsttError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BootstrapPlan:
    B: int = 500
    strata: str = "group"
    cluster: str = "person_id"
    seed: int = 0

    def __post_init__(self):
        if self.B < 1:
            raise ConfigError("bootstrap B must be at least 1")


@dataclass(frozen=True)
class Resample:
    """Per-replicate person draws.

    ``persons`` lists the distinct cluster ids; ``indices[b]`` holds the
    positions (into ``persons``) drawn for replicate ``b``.
    """

    persons: np.ndarray
    strata: np.ndarray
    indices: np.ndarray

    def multiplicity(self) -> np.ndarray:
        """``(B, n_persons)`` count of each person in each replicate."""
        B, n = self.indices.shape[0], len(self.persons)
        counts = np.zeros((B, n), dtype=np.int64)
        for b in range(B):
            counts[b] = np.bincount(self.indices[b], minlength=n)
        return counts


def person_strata(cohort: Cohort, plan: BootstrapPlan) -> tuple[np.ndarray, np.ndarray]:
    df = cohort.data
    per_person = df.groupby(plan.cluster, sort=True)[plan.strata].nunique()
    if (per_person > 1).any():
        bad = per_person.index[per_person > 1][0]
        raise DataError(f"cluster {bad!r} spans more than one stratum")
    first = df.groupby(plan.cluster, sort=True)[plan.strata].first()
    return first.index.to_numpy(), first.to_numpy()


def resample_indices(plan: BootstrapPlan, cohort: Cohort) -> Resample:
    """Balanced draws: within a stratum of ``n_s`` persons, shuffle ``B``
    concatenated copies of the person list and cut it into ``B`` blocks of
    ``n_s``. Every person then appears exactly ``B`` times in total.
    """
    persons, strata = person_strata(cohort, plan)
    rng = np.random.default_rng(plan.seed)
    levels = np.unique(strata)
    if len(levels) == 0:
        raise DataError("cohort has no persons to resample")
    blocks = []
    for level in levels:
        members = np.flatnonzero(strata == level)
        if len(members) == 0:
            raise DataError(f"stratum {level!r} is empty")
        pool = np.tile(members, plan.B)
        rng.shuffle(pool)
        blocks.append(pool.reshape(plan.B, len(members)))
    return Resample(persons, strata, np.concatenate(blocks, axis=1))


def replicate_cohort(cohort: Cohort, resample: Resample, b: int, plan: BootstrapPlan = BootstrapPlan()) -> Cohort:
    """Cohort for replicate ``b``: each drawn person brings all of their records.

    A person drawn ``j`` times appears as ``j`` distinct clusters, relabelled
    ``<id>#<copy>``.
    """
    df = cohort.data
    codes = pd.Index(resample.persons).get_indexer(df[plan.cluster].to_numpy())
    order = np.argsort(codes, kind="mergesort")
    counts = np.bincount(codes, minlength=len(resample.persons))
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    drawn = np.sort(resample.indices[b], kind="mergesort")
    n_rows = counts[drawn]
    copy_no = np.zeros(len(drawn), dtype=np.int64)
    same = np.concatenate([[False], drawn[1:] == drawn[:-1]])
    # running copy number within runs of the same person
    run_start = np.flatnonzero(~same)
    run_id = np.cumsum(~same) - 1
    copy_no = np.arange(len(drawn)) - run_start[run_id]
    row_pos = np.repeat(starts[drawn], n_rows) + (np.arange(n_rows.sum()) - np.repeat(np.cumsum(n_rows) - n_rows, n_rows))
    rows = order[row_pos]
    frame = df.iloc[rows].reset_index(drop=True)
    frame[plan.cluster] = frame[plan.cluster].astype(str) + "#" + np.repeat(copy_no, n_rows).astype(str)
    return Cohort(frame, cohort.schema, cohort.window_hours, cohort.standard_group, cohort.tau)


@dataclass(frozen=True)
class BootstrapResult:
    names: tuple[str, ...]
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    replicates: np.ndarray
    n_failed: int
    level: float

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"estimate": self.estimate, "lower": self.lower, "upper": self.upper},
                            index=list(self.names))

    def interval(self, name: str) -> tuple[float, float]:
        j = self.names.index(name)
        return float(self.lower[j]), float(self.upper[j])


def _as_vector(value) -> tuple[tuple[str, ...] | None, np.ndarray]:
    if isinstance(value, Mapping):
        return tuple(value), np.array([float(v) for v in value.values()])
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    return None, arr


def bootstrap_ci(estimator: Callable[[Cohort], object], cohort: Cohort, plan: BootstrapPlan = BootstrapPlan(),
                 level: float = 0.95, *, threads: int = 1, max_failed_fraction: float = 0.5) -> BootstrapResult:
    """Percentile intervals for every quantity ``estimator`` returns.

    ``estimator`` maps a cohort to a vector or a mapping of named values and
    is refit from scratch on every replicate. Replicates on which it raises a
    package error (e.g. separation) are dropped and counted; a warning is
    issued above 5 % and an error raised above ``max_failed_fraction``.
    Results do not depend on ``threads``.
    """
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    names, point = _as_vector(estimator(cohort))
    names = names or tuple(f"q{j}" for j in range(len(point)))
    resample = resample_indices(plan, cohort)

    def run(b):
        try:
            _, vec = _as_vector(estimator(replicate_cohort(cohort, resample, b, plan)))
        except (NumericalError, DataError) as exc:
            logger.debug("bootstrap replicate %d failed: %s", b, exc)
            return None
        if vec.shape != point.shape:
            raise TsttError(f"estimator returned {vec.shape} values on replicate {b}, expected {point.shape}")
        return vec

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(plan.B)))
    else:
        results = [run(b) for b in range(plan.B)]

    ok = [r for r in results if r is not None]
    n_failed = plan.B - len(ok)
    if n_failed > max_failed_fraction * plan.B:
        raise NumericalError(f"{n_failed} of {plan.B} bootstrap replicates failed")
    if n_failed > 0.05 * plan.B:
        warnings.warn(f"{n_failed} of {plan.B} bootstrap replicates failed and were dropped", RuntimeWarning,
                      stacklevel=2)
    reps = np.vstack(ok) if ok else np.empty((0, len(point)))
    alpha = 1.0 - level
    lower, upper = np.quantile(reps, [alpha / 2, 1 - alpha / 2], axis=0, method="linear")
    return BootstrapResult(names, point, lower, upper, reps, n_failed, level)
