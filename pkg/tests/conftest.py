import numpy as np
import pandas as pd
import pytest

from tstt.cohort import Cohort, Covariate, CovariateSchema
from tstt.synthgen import SynthConfig, generate_cohort


def make_frame(rows):
    """Minimal record frame from dicts, filling the outcome columns consistently."""
    df = pd.DataFrame(rows)
    if "event" not in df:
        df["event"] = df["outcome"].astype(bool)
    if "duration" not in df:
        df["duration"] = np.where(df["event"], 60.0, 1440.0)
    return df


@pytest.fixture
def schema():
    return CovariateSchema((Covariate("age", "numeric", "allowable"),
                            Covariate("severity", "categorical", "allowable"),
                            Covariate("smoking", "categorical", "nonallowable")))


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(n_per_group=600, n_windows=4, seed=123)


@pytest.fixture(scope="session")
def small_cohort(small_config):
    return generate_cohort(small_config)


@pytest.fixture
def tiny_cohort(schema):
    rng = np.random.default_rng(0)
    rows = []
    for g in (0, 1):
        for i in range(30):
            sao2 = float(rng.uniform(85, 99))
            rows.append({"person_id": f"p{g}{i}", "window": i % 3, "group": g, "sao2": sao2,
                         "spo2": min(100.0, sao2 + rng.normal(1, 2)), "age": float(rng.normal(60, 10)),
                         "severity": ["mild", "severe"][i % 2], "smoking": ["never", "current"][(i // 2) % 2],
                         "outcome": int(rng.random() < 0.4)})
    return Cohort.from_frame(make_frame(rows), schema)


# one PASS/FAIL line per acceptance criterion, aggregated over its tests
_CRITERIA: dict = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or (call.when != "call" and call.excinfo is None):
        return
    number, title = mark.args
    ok = call.excinfo is None
    prev = _CRITERIA.get(number, (title, True))
    _CRITERIA[number] = (title, prev[1] and ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {number:2d}: {title}")
