"""Model matrices for the outcome and standardization regressions.

Categorical covariates expand to indicator columns against a reference level,
the most frequent level in the cohort (ties broken lexicographically).
Calendar time enters either linearly (column ``window``) or as
piecewise-constant bins of the window index.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .cohort import Cohort
from .errors import ConfigError, DataError

K_FORMS = ("linear", "piecewise")


def reference_level(values) -> str:
    counts = pd.Series(values).astype(str).value_counts()
    top = counts.max()
    return sorted(counts.index[counts == top])[0]


@dataclass(frozen=True)
class DesignSpec:
    categorical_levels: Mapping[str, tuple[str, ...]]
    k_form: str = "linear"
    k_edges: tuple[float, ...] = ()
    include_window: bool = True

    @classmethod
    def from_cohort(cls, cohort: Cohort, k_form="linear", k_bins=4) -> "DesignSpec":
        """Fix reference levels and window bins from the whole cohort."""
        if k_form not in K_FORMS:
            raise ConfigError(f"k_form must be one of {K_FORMS}, got {k_form!r}")
        levels = {}
        for name in cohort.schema.categorical:
            values = cohort.data[name].astype(str)
            ref = reference_level(values)
            levels[name] = (ref, *sorted(set(values) - {ref}))
        windows = cohort.windows
        include = len(windows) > 1
        edges = ()
        if k_form == "piecewise" and include:
            if k_bins < 2:
                raise ConfigError("piecewise calendar time needs k_bins >= 2")
            qs = np.quantile(windows, np.linspace(0, 1, k_bins + 1)[1:-1], method="lower")
            edges = tuple(float(e) for e in np.unique(qs) if e > windows.min())
        return cls(levels, k_form, edges, include)

    def window_columns(self, frame: pd.DataFrame) -> dict[str, np.ndarray]:
        k = frame["window"].to_numpy(dtype=float)
        if not self.include_window:
            return {}
        if self.k_form == "linear":
            return {"window": k}
        return {f"window>={e:g}": (k >= e).astype(float) for e in self.k_edges}

    def matrix(self, frame: pd.DataFrame, terms: Sequence[str], intercept: bool) -> pd.DataFrame:
        """Expand ``terms`` (covariate names and ``"window"``) into a numeric design."""
        cols: dict[str, np.ndarray] = {}
        if intercept:
            cols["const"] = np.ones(len(frame))
        for term in terms:
            if term == "window":
                cols.update(self.window_columns(frame))
            elif term in self.categorical_levels:
                values = frame[term].astype(str).to_numpy()
                ref, *others = self.categorical_levels[term]
                unknown = set(values) - set(self.categorical_levels[term])
                if unknown:
                    raise DataError(f"covariate {term!r} has levels {sorted(unknown)} unseen when the design was fixed")
                for level in others:
                    cols[f"{term}[{level}]"] = (values == level).astype(float)
            else:
                if term not in frame.columns:
                    raise DataError(f"design term {term!r} missing from data")
                cols[term] = frame[term].to_numpy(dtype=float)
        return pd.DataFrame(cols, index=frame.index)


def outcome_terms(cohort: Cohort) -> list[str]:
    """Exposure, allowables, non-allowables and calendar time."""
    return ["spo2", *cohort.schema.allowables, *cohort.schema.nonallowables, "window"]


def standardization_terms(cohort: Cohort) -> list[str]:
    """Allowables and calendar time only; non-allowables never enter."""
    return [*cohort.schema.allowables, "window"]
