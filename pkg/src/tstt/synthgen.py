"""Synthetic EMR-like cohorts with known counterfactual truth.

Treatment decisions follow an exponential time-to-treatment law. The log
hazard is linear in observed SpO2, the allowables (SaO2, age, respiratory
rate, severity), the non-allowables (smoking, ADI) and calendar time, so the
probability of treatment within ``tau`` is ``1 - exp(-exp(eta))``. An optional
additive shift ``delta`` for group 1 on the probability scale is applied
afterwards. Since the law is known, disparities and intervention effects can
be computed exactly by simulation (:func:`oracle_truth`).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping

import numpy as np
import pandas as pd

from .cohort import Cohort, Covariate, CovariateSchema
from .errors import ConfigError
from .intervention import ArmSet, spo2_from_deviates

SEVERITY_LEVELS = ("mild", "moderate", "severe")
SMOKING_LEVELS = ("never", "current")


def _pair(v):
    return tuple(float(x) for x in v)


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings. Two-element tuples hold (group 0, group 1) values."""

    n_per_group: int = 25_000
    n_windows: int = 60
    repeat_prob: float = 0.2
    window_hours: float = 12.0
    tau: float = 1440.0
    standard_group: int = 1
    seed: int = 20240601

    sao2_mean: tuple = (93.0, 92.6)
    sao2_sd: tuple = (3.5, 3.5)
    sao2_bounds: tuple = (70.0, 100.0)
    age_mean: tuple = (62.6, 60.6)
    age_sd: tuple = (15.0, 15.0)
    resp_mean: tuple = (20.0, 20.6)
    resp_sd: tuple = (4.0, 4.0)
    severity_probs: tuple = ((0.5, 0.35, 0.15), (0.5, 0.35, 0.15))
    smoking_prob: tuple = (0.2, 0.2)
    adi_mean: tuple = (50.0, 50.0)
    adi_sd: tuple = (20.0, 20.0)

    # true device in the observed data
    device_mu: tuple = (0.56, 1.99)
    device_sigma: tuple = (3.29, 3.61)

    # log-hazard law (covariates centered at the values in *_center)
    intercept: float = -1.4
    coef_spo2: float = -0.1
    coef_sao2: float = -0.05
    coef_age: float = 0.01
    coef_resp: float = 0.04
    coef_severity: tuple = (0.0, 0.4, 0.8)
    coef_smoking: float = 0.2
    coef_adi: float = 0.0
    coef_window: float = 0.002
    group_log_hazard: float = 0.0
    delta: float = 0.0
    spo2_center: float = 92.0
    sao2_center: float = 92.0
    age_center: float = 60.0
    resp_center: float = 20.0
    adi_center: float = 50.0

    def __post_init__(self):
        if self.n_per_group < 1 or self.n_windows < 1:
            raise ConfigError("n_per_group and n_windows must be positive")
        if self.repeat_prob and self.n_windows < 2:
            raise ConfigError("repeat enrollment needs at least two windows")
        if not 0 <= self.repeat_prob <= 1:
            raise ConfigError("repeat_prob must lie in [0, 1]")
        for name in ("sao2_sd", "age_sd", "resp_sd", "adi_sd", "device_sigma"):
            if any(v <= 0 for v in getattr(self, name)):
                raise ConfigError(f"{name}: standard deviations must be positive")
        for probs in self.severity_probs:
            if len(probs) != len(SEVERITY_LEVELS) or any(p < 0 for p in probs) or abs(sum(probs) - 1) > 1e-9:
                raise ConfigError("severity_probs rows must be probability vectors over mild/moderate/severe")
        if any(not 0 <= p <= 1 for p in self.smoking_prob):
            raise ConfigError("smoking_prob must lie in [0, 1]")
        if len(self.coef_severity) != len(SEVERITY_LEVELS):
            raise ConfigError("coef_severity needs one value per severity level")
        lo, hi = self.sao2_bounds
        if not 0 <= lo < hi <= 100:
            raise ConfigError("sao2_bounds must satisfy 0 <= lo < hi <= 100")
        if self.standard_group not in (0, 1):
            raise ConfigError("standard_group must be 0 or 1")
        if self.tau <= 0 or self.window_hours <= 0:
            raise ConfigError("tau and window_hours must be positive")

    @classmethod
    def from_dict(cls, spec: Mapping) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(spec) - known
        if unknown:
            raise ConfigError(f"unknown synthetic-config keys: {sorted(unknown)}")
        kw = {}
        for k, v in spec.items():
            if isinstance(v, list):
                v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
            kw[k] = v
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_updates(self, **kw) -> "SynthConfig":
        return SynthConfig.from_dict({**asdict(self), **kw})


def synth_schema(include_adi=False) -> CovariateSchema:
    covs = [Covariate("age", "numeric", "allowable"), Covariate("resp_rate", "numeric", "allowable"),
            Covariate("severity", "categorical", "allowable"), Covariate("smoking", "categorical", "nonallowable")]
    if include_adi:
        covs.append(Covariate("adi", "numeric", "nonallowable"))
    return CovariateSchema(tuple(covs))


def treatment_probability(config: SynthConfig, group, spo2, sao2, age, resp, severity_idx, smoking, adi,
                          window) -> np.ndarray:
    """Probability of treatment within ``tau`` under the declared law."""
    c = config
    eta = (c.intercept + c.coef_spo2 * (spo2 - c.spo2_center) + c.coef_sao2 * (sao2 - c.sao2_center)
           + c.coef_age * (age - c.age_center) + c.coef_resp * (resp - c.resp_center)
           + np.asarray(c.coef_severity)[severity_idx] + c.coef_smoking * smoking
           + c.coef_adi * (adi - c.adi_center) + c.coef_window * window
           + c.group_log_hazard * np.asarray(group))
    p = -np.expm1(-np.exp(eta)) + c.delta * np.asarray(group)
    return np.clip(p, 0.0, 1.0 - 1e-12)


def rmst_from_probability(p, tau) -> np.ndarray:
    """RMST of an exponential time with ``P(T <= tau) = p``: ``p * tau / -log(1 - p)``."""
    p = np.asarray(p, dtype=float)
    cum_hazard = -np.log1p(-p)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(cum_hazard > 1e-12, p * tau / cum_hazard, tau * (1 - 0.5 * cum_hazard))
    return out


def _draw_allowables(config: SynthConfig, group: int, n: int, rng: np.random.Generator) -> dict:
    g = group
    lo, hi = config.sao2_bounds
    return {
        "sao2": np.clip(rng.normal(config.sao2_mean[g], config.sao2_sd[g], n), lo, hi),
        "age": rng.normal(config.age_mean[g], config.age_sd[g], n),
        "resp_rate": rng.normal(config.resp_mean[g], config.resp_sd[g], n),
        "severity_idx": rng.choice(len(SEVERITY_LEVELS), size=n, p=config.severity_probs[g]),
    }


def _draw_nonallowables(config: SynthConfig, group: int, n: int, rng: np.random.Generator) -> dict:
    g = group
    return {"smoking": (rng.random(n) < config.smoking_prob[g]).astype(np.int64),
            "adi": rng.normal(config.adi_mean[g], config.adi_sd[g], n)}


def generate_cohort(config: SynthConfig, *, include_adi=False) -> Cohort:
    """Draw a cohort from the declared law; bit-identical for a fixed seed.

    Each person enrolls in one window, or with probability ``repeat_prob`` in
    two distinct windows. Age, smoking and ADI are per person; SaO2,
    respiratory rate and severity are drawn per record.
    """
    rng = np.random.default_rng(config.seed)
    parts = []
    for g in (0, 1):
        n = config.n_per_group
        n_rec = 1 + (rng.random(n) < config.repeat_prob).astype(np.int64)
        person = np.repeat(np.arange(n), n_rec)
        first = rng.integers(0, config.n_windows, n)
        if config.n_windows > 1:
            second = (first + rng.integers(1, config.n_windows, n)) % config.n_windows
        else:
            second = first
        occurrence = np.concatenate([np.arange(k) for k in n_rec]) if n else np.array([], dtype=np.int64)
        window = np.where(occurrence == 0, first[person], second[person])
        m = len(person)

        age = rng.normal(config.age_mean[g], config.age_sd[g], n)[person]
        nonallow = _draw_nonallowables(config, g, n, rng)
        smoking = nonallow["smoking"][person]
        adi = nonallow["adi"][person]
        lo, hi = config.sao2_bounds
        sao2 = np.clip(rng.normal(config.sao2_mean[g], config.sao2_sd[g], m), lo, hi)
        resp = rng.normal(config.resp_mean[g], config.resp_sd[g], m)
        severity = rng.choice(len(SEVERITY_LEVELS), size=m, p=config.severity_probs[g])
        spo2 = np.clip(sao2 + rng.normal(config.device_mu[g], config.device_sigma[g], m), 0.0, 100.0)

        p = treatment_probability(config, g, spo2, sao2, age, resp, severity, smoking, adi, window)
        cum_hazard = -np.log1p(-p)
        with np.errstate(divide="ignore"):
            rate = cum_hazard / config.tau
            t = rng.exponential(1.0, m) / rate
        event = t <= config.tau
        duration = np.where(event, t, config.tau)
        parts.append(pd.DataFrame({
            "person_id": [f"G{g}-{i:06d}" for i in person],
            "window": window.astype(np.int64),
            "group": g,
            "sao2": sao2,
            "spo2": spo2,
            "age": age,
            "resp_rate": resp,
            "severity": np.asarray(SEVERITY_LEVELS)[severity],
            "smoking": np.asarray(SMOKING_LEVELS)[smoking],
            "adi": adi,
            "outcome": event.astype(np.int64),
            "duration": duration,
            "event": event,
        }))
    frame = pd.concat(parts, ignore_index=True)
    return Cohort.from_frame(frame, synth_schema(include_adi), window_hours=config.window_hours,
                             standard_group=config.standard_group, tau=config.tau)


@dataclass(frozen=True)
class SynthTruth:
    """True standardized means per arm, outcome kind and group.

    ``table`` has one row per (outcome_kind, arm) with columns ``mu_g0``,
    ``mu_g1``, ``psi``, ``tau_effect`` and their Monte Carlo standard errors
    (``*_se``).
    """

    table: pd.DataFrame
    n_oracle: int
    reference: str
    config: SynthConfig = field(repr=False)

    def row(self, outcome_kind: str, arm: str) -> pd.Series:
        t = self.table
        return t.loc[(t["outcome_kind"] == outcome_kind) & (t["arm"] == arm)].iloc[0]


def oracle_truth(config: SynthConfig, arm_set: ArmSet, n_oracle: int = 10**7, *, seed: int | None = None,
                 block: int = 500_000) -> SynthTruth:
    """Direct simulation of each group's potential outcomes under each arm.

    Allowables and calendar time come from the standard group's generator;
    non-allowables from each group's own generator. One set of draws is
    shared by every arm and by both groups, so contrasts against the
    reference arm are exactly zero for the reference itself. RMST uses the
    closed form for exponential times, so the only noise is from the
    covariate and device-error draws.
    """
    if n_oracle < 2:
        raise ConfigError("n_oracle must be at least 2")
    rng = np.random.default_rng(config.seed + 7919 if seed is None else seed)
    names = arm_set.names
    kinds = ("binary", "rmst")
    acc = {(k, a, stat): np.zeros(2) for k in kinds for a in names
           for stat in ("mu_g0", "mu_g1", "psi", "tau_effect")}
    done = 0
    while done < n_oracle:
        n = min(block, n_oracle - done)
        allow = _draw_allowables(config, config.standard_group, n, rng)
        window = rng.integers(0, config.n_windows, n)
        nonallow = {g: _draw_nonallowables(config, g, n, rng) for g in (0, 1)}
        u = rng.standard_normal(n)
        per_arm = {}
        for arm in arm_set:
            vals = {}
            for g in (0, 1):
                z = spo2_from_deviates(arm, g, allow["sao2"], u)
                p = treatment_probability(config, g, z, allow["sao2"], allow["age"], allow["resp_rate"],
                                          allow["severity_idx"], nonallow[g]["smoking"], nonallow[g]["adi"],
                                          window)
                vals[("binary", g)] = p
                vals[("rmst", g)] = rmst_from_probability(p, config.tau)
            per_arm[arm.name] = vals
        ref = per_arm[arm_set.reference_name]
        for a in names:
            for k in kinds:
                v1, v0 = per_arm[a][(k, 1)], per_arm[a][(k, 0)]
                d = v1 - v0
                stats = {"mu_g0": v0, "mu_g1": v1, "psi": d, "tau_effect": d - (ref[(k, 1)] - ref[(k, 0)])}
                for stat, x in stats.items():
                    acc[(k, a, stat)] += (x.sum(), np.square(x).sum())
        done += n

    rows = []
    for k in kinds:
        for a in names:
            row = {"outcome_kind": k, "arm": a, "delta_mu": arm_set[a].delta_mu,
                   "delta_sigma": arm_set[a].delta_sigma}
            for stat in ("mu_g0", "mu_g1", "psi", "tau_effect"):
                s, ss = acc[(k, a, stat)]
                mean = s / n_oracle
                var = max(ss / n_oracle - mean ** 2, 0.0) * n_oracle / (n_oracle - 1)
                row[stat] = mean
                row[f"{stat}_se"] = float(np.sqrt(var / n_oracle))
            if a == arm_set.reference_name:
                row["tau_effect"] = 0.0
                row["tau_effect_se"] = 0.0
            rows.append(row)
    return SynthTruth(pd.DataFrame(rows), int(n_oracle), arm_set.reference_name, config)
