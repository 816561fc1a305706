import numpy as np
import pandas as pd
import pytest

from tstt.design import DesignSpec, outcome_terms, reference_level, standardization_terms
from tstt.errors import ConfigError, DataError


def test_reference_level_is_most_frequent_then_lexicographic():
    assert reference_level(["b", "a", "b"]) == "b"
    assert reference_level(["b", "a", "a", "b", "c"]) == "a"


def test_terms_keep_nonallowables_out_of_standardization(tiny_cohort):
    assert outcome_terms(tiny_cohort) == ["spo2", "sao2", "age", "severity", "smoking", "window"]
    assert standardization_terms(tiny_cohort) == ["sao2", "age", "severity", "window"]


def test_matrix_columns(tiny_cohort):
    spec = DesignSpec.from_cohort(tiny_cohort)
    X = spec.matrix(tiny_cohort.data, outcome_terms(tiny_cohort), intercept=True)
    assert list(X.columns) == ["const", "spo2", "sao2", "age", "severity[severe]", "smoking[current]", "window"]
    np.testing.assert_array_equal(X["severity[severe]"], tiny_cohort.data["severity"] == "severe")


def test_single_window_drops_calendar_term(tiny_cohort):
    one = tiny_cohort.subset(tiny_cohort.data["window"] == 0)
    spec = DesignSpec.from_cohort(one)
    assert "window" not in spec.matrix(one.data, ["window"], intercept=False).columns


def test_piecewise_bins(small_cohort):
    spec = DesignSpec.from_cohort(small_cohort, "piecewise", k_bins=4)
    X = spec.matrix(small_cohort.data, ["window"], intercept=False)
    assert list(X.columns) == [f"window>={e:g}" for e in spec.k_edges] and len(spec.k_edges) >= 1
    with pytest.raises(ConfigError):
        DesignSpec.from_cohort(small_cohort, "spline")
    with pytest.raises(ConfigError):
        DesignSpec.from_cohort(small_cohort, "piecewise", k_bins=1)


def test_unseen_level_rejected(tiny_cohort):
    spec = DesignSpec.from_cohort(tiny_cohort)
    frame = tiny_cohort.data.assign(severity="critical")
    with pytest.raises(DataError, match="critical"):
        spec.matrix(frame, ["severity"], intercept=True)
    with pytest.raises(DataError):
        spec.matrix(tiny_cohort.data, ["bmi"], intercept=True)
