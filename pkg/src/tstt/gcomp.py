"""G-computation of standardized group means under device interventions.

For each group ``g`` and arm:

1. fit the outcome model on ``[spo2, allowables, non-allowables, window]``
   within the group (logistic GLM for the binary outcome, Cox model for
   time to treatment);
2. replace observed SpO2 with draws from the arm's error law for the group
   and average the predictions over ``M`` draws per record (``Q1``);
3. regress ``Q1`` on ``[allowables, window]`` (fractional logistic for
   probabilities, linear for RMST);
4. predict that model over the standard population's rows (``Q2``);
5. average ``Q2``.

The disparity is ``mu(1) - mu(0)``; the intervention effect is the change in
disparity against the reference arm.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from . import glm, survival
from .cohort import Cohort
from .design import DesignSpec, outcome_terms, standardization_terms
from .errors import ConfigError, DataError
from .intervention import ArmSet, InterventionArm, RecordStreams, role_swap, spo2_from_deviates

logger = logging.getLogger(__name__)

OUTCOME_KINDS = ("binary", "rmst")


@dataclass(frozen=True)
class GcompOptions:
    outcome_kind: str = "binary"
    mc_draws: int = 100
    tau: float | None = None
    k_form: str = "linear"
    k_bins: int = 4
    swap_roles: bool = False
    seed: int = 0
    per_window: bool = False

    def __post_init__(self):
        if self.outcome_kind not in OUTCOME_KINDS:
            raise ConfigError(f"outcome_kind must be one of {OUTCOME_KINDS}, got {self.outcome_kind!r}")
        if self.mc_draws < 1:
            raise ConfigError("mc_draws must be at least 1")
        if self.tau is not None and self.tau <= 0:
            raise ConfigError("tau must be positive")


@dataclass(frozen=True)
class DisparityEstimate:
    arm: str
    outcome_kind: str
    mu_g1: float
    mu_g0: float
    delta_mu: float | None = None
    delta_sigma: float | None = None
    tau_effect: float | None = None
    is_reference: bool = False
    ci: Mapping[str, tuple[float, float]] = field(default_factory=dict)
    per_window: pd.DataFrame | None = field(default=None, repr=False, compare=False)

    @property
    def psi(self) -> float:
        return self.mu_g1 - self.mu_g0

    def values(self) -> dict[str, float]:
        out = {"mu_g0": self.mu_g0, "mu_g1": self.mu_g1, "psi": self.psi}
        if self.tau_effect is not None:
            out["tau_effect"] = self.tau_effect
        return out

    def to_dict(self) -> dict:
        out = {"arm": self.arm, "outcome_kind": self.outcome_kind, "delta_mu": self.delta_mu,
               "delta_sigma": self.delta_sigma, "is_reference": self.is_reference, **self.values(),
               "ci": {k: list(v) for k, v in self.ci.items()}}
        if self.per_window is not None:
            out["per_window"] = self.per_window.to_dict(orient="list")
        return out


@dataclass
class GcompPipeline:
    """Fitted Step-1 models plus the design conventions shared by every arm.

    Step-1 fits do not depend on the arm, so they are computed once here and
    reused. Common random numbers per group are cached as well. ``transform``
    rewrites the SpO2/SaO2 slots after each Step-2 draw; it defaults to
    :func:`role_swap` when ``options.swap_roles`` is set.
    """

    cohort: Cohort
    options: GcompOptions
    design: DesignSpec
    transform: Callable[[pd.DataFrame], pd.DataFrame] | None = None
    outcome_models: dict = field(default_factory=dict)
    _frames: dict = field(default_factory=dict, repr=False)
    _deviates: dict = field(default_factory=dict, repr=False)
    _standard_design: pd.DataFrame | None = field(default=None, repr=False)

    @classmethod
    def fit(cls, cohort: Cohort, options: GcompOptions = GcompOptions(), *,
            transform: Callable[[pd.DataFrame], pd.DataFrame] | None = None) -> "GcompPipeline":
        design = DesignSpec.from_cohort(cohort, options.k_form, options.k_bins)
        if transform is None and options.swap_roles:
            transform = role_swap
        pipe = cls(cohort, options, design, transform)
        for g in (0, 1):
            pipe.outcome_models[g] = step1_fit_outcome(cohort, g, options.outcome_kind, design=design)
        return pipe

    @property
    def tau(self) -> float:
        return float(self.options.tau if self.options.tau is not None else self.cohort.tau)

    def frame(self, group: int) -> pd.DataFrame:
        if group not in self._frames:
            self._frames[group] = self.cohort.group_frame(group)
        return self._frames[group]

    def deviates(self, group: int) -> np.ndarray:
        if group not in self._deviates:
            streams = RecordStreams(self.options.seed)
            self._deviates[group] = streams.for_frame(self.frame(group), self.options.mc_draws)
        return self._deviates[group]

    def standard_design(self) -> pd.DataFrame:
        if self._standard_design is None:
            std = self.cohort.standard_frame()
            if len(std) == 0:
                raise DataError("standard population is empty")
            self._standard_design = self.design.matrix(std, standardization_terms(self.cohort), intercept=True)
        return self._standard_design

    def group_mean(self, group: int, arm: InterventionArm) -> tuple[float, pd.Series | None]:
        frame = self.frame(group)
        q1 = step2_intervene_predict(self.outcome_models[group], frame, arm, self.deviates(group),
                                     self.options.mc_draws, design=self.design, tau=self.tau,
                                     transform=self.transform)
        fit3 = step3_standardize_fit(q1, frame, self.options.outcome_kind, design=self.design, cohort=self.cohort)
        q2 = step4_predict_standard(fit3, self.standard_design())
        return step5_marginalize(q2), self._per_window(q2)

    def _per_window(self, q2):
        if not self.options.per_window:
            return None
        k = self.cohort.standard_frame()["window"].to_numpy()
        return pd.Series(q2).groupby(k).mean()


@dataclass(frozen=True)
class ConstantModel:
    """Stand-in for a model whose response never varies.

    A binary outcome that is identically 0 or 1 (or a time to event with no
    events at all) has no finite logistic or Cox fit; every prediction is
    then simply that constant.
    """

    value: float

    def predict(self, n: int) -> np.ndarray:
        return np.full(n, self.value)


def _boundary_constant(y, lo=0.0, hi=1.0) -> ConstantModel | None:
    y = np.asarray(y, dtype=float)
    for v in (lo, hi):
        if len(y) and (y == v).all():
            return ConstantModel(v)
    return None


def _group_subset(cohort: Cohort, group: int) -> pd.DataFrame:
    frame = cohort.group_frame(group)
    if len(frame) == 0:
        raise DataError(f"group {group} has no records")
    return frame


def step1_fit_outcome(cohort: Cohort, group: int, outcome_kind: str, *, design: DesignSpec | None = None):
    """Outcome model within one group: logistic GLM (binary) or Cox (rmst)."""
    if outcome_kind not in OUTCOME_KINDS:
        raise ConfigError(f"outcome_kind must be one of {OUTCOME_KINDS}")
    design = design or DesignSpec.from_cohort(cohort)
    frame = _group_subset(cohort, group)
    terms = outcome_terms(cohort)
    if outcome_kind == "binary":
        y = frame["outcome"].to_numpy(dtype=float)
        constant = _boundary_constant(y)
        if constant is not None:
            return constant
        X = design.matrix(frame, terms, intercept=True)
        return glm.fit_glm(X, y, "binomial")
    if not frame["event"].any():
        return ConstantModel(float(cohort.tau))
    X = design.matrix(frame, terms, intercept=False)
    return survival.fit_cox(X, frame["duration"].to_numpy(), frame["event"].to_numpy())


_NOT_COVARIATES = frozenset({"person_id", "window", "group", "standard_flag", "spo2", "sao2", "outcome",
                             "duration", "event"})


def _frame_terms(frame: pd.DataFrame) -> list[str]:
    return ["spo2", "sao2", *[c for c in frame.columns if c not in _NOT_COVARIATES], "window"]


def step2_intervene_predict(model, frame: pd.DataFrame, arm: InterventionArm, rng, mc_draws: int, *,
                            design: DesignSpec, tau: float = 1440.0, terms: Sequence[str] | None = None,
                            transform: Callable[[pd.DataFrame], pd.DataFrame] | None = None) -> np.ndarray:
    """Average predicted outcome per record with SpO2 drawn from ``arm``.

    ``rng`` is either a ``(n_records, >= mc_draws)`` array of standard-normal
    deviates (common random numbers), a :class:`RecordStreams`, or a
    ``numpy.random.Generator``. ``transform`` rewrites the ``spo2``/``sao2``
    pair after each draw (e.g. :func:`role_swap`).

    Returns ``Q1``: probabilities for a GLM, RMST (minutes) for a Cox model.
    """
    if len(frame) == 0:
        raise DataError("no records to predict")
    if isinstance(model, ConstantModel):
        return model.predict(len(frame))
    groups = frame["group"].to_numpy()
    if (groups != groups[0]).any():
        raise DataError("step 2 acts on a single group at a time")
    group = int(groups[0])
    if isinstance(rng, RecordStreams):
        u = rng.for_frame(frame, mc_draws)
    elif isinstance(rng, np.random.Generator):
        u = rng.standard_normal((len(frame), mc_draws))
    else:
        u = np.asarray(rng, dtype=float)
        if u.ndim != 2 or u.shape[0] != len(frame) or u.shape[1] < mc_draws:
            raise DataError(f"deviates must have shape ({len(frame)}, >={mc_draws})")
        u = u[:, :mc_draws]
    sao2 = frame["sao2"].to_numpy(dtype=float)
    draws = spo2_from_deviates(arm, group, sao2, u)

    is_cox = isinstance(model, survival.CoxFit)
    X = design.matrix(frame, terms or _frame_terms(frame), intercept=not is_cox)
    if sorted(X.columns) != sorted(model.columns):
        raise DataError(f"model covariates {model.columns} do not match the design {list(X.columns)}")
    cols = list(model.columns)
    Xv = X.loc[:, cols].to_numpy(dtype=float)
    j_spo2, j_sao2 = cols.index("spo2"), cols.index("sao2")
    beta = model.coefficients.to_numpy()

    eta = np.empty((len(frame), mc_draws))
    for m in range(mc_draws):
        slots = pd.DataFrame({"spo2": draws[:, m], "sao2": sao2})
        if transform is not None:
            slots = transform(slots)
        Xv[:, j_spo2] = slots["spo2"].to_numpy()
        Xv[:, j_sao2] = slots["sao2"].to_numpy()
        eta[:, m] = Xv @ beta

    if is_cox:
        evaluate = survival.rmst_evaluator(model, eta.min(), eta.max(), tau)
        return evaluate(eta).mean(axis=1)
    if model.family == "gaussian":
        return eta.mean(axis=1)
    return expit(eta).mean(axis=1)


def step3_standardize_fit(q1, frame: pd.DataFrame, outcome_kind: str, *, design: DesignSpec,
                          cohort: Cohort | None = None, terms: Sequence[str] | None = None):
    """Regress ``Q1`` on allowables and calendar time within the group.

    Binary outcomes use a logistic fit that accepts fractional responses;
    RMST uses a linear fit. ``Q1`` identically 0 or 1 yields a
    :class:`ConstantModel`.
    """
    q1 = np.asarray(q1, dtype=float)
    if len(q1) != len(frame):
        raise DataError(f"Q1 has {len(q1)} values for {len(frame)} records")
    if terms is None:
        if cohort is None:
            raise ConfigError("step 3 needs either the cohort or explicit terms")
        terms = standardization_terms(cohort)
    X = design.matrix(frame, terms, intercept=True)
    if outcome_kind == "binary":
        constant = _boundary_constant(q1)
        if constant is not None:
            return constant
        return glm.fit_glm(X, q1, "binomial")
    return glm.fit_glm(X, q1, "gaussian")


def step4_predict_standard(fit, standard_design: pd.DataFrame) -> np.ndarray:
    """``Q2``: response-scale predictions over the standard population's rows."""
    if len(standard_design) == 0:
        raise DataError("standard population is empty")
    if isinstance(fit, ConstantModel):
        return fit.predict(len(standard_design))
    return glm.predict(fit, standard_design, scale="response")


def step5_marginalize(q2) -> float:
    q2 = np.asarray(q2, dtype=float)
    if q2.size == 0:
        raise DataError("nothing to marginalize")
    return float(q2.mean())


def estimate_arm(cohort: Cohort, arm: InterventionArm, options: GcompOptions = GcompOptions(), *,
                 pipeline: GcompPipeline | None = None) -> DisparityEstimate:
    """Standardized means for both groups under one arm and their disparity."""
    pipe = pipeline or GcompPipeline.fit(cohort, options)
    mu1, pw1 = pipe.group_mean(1, arm)
    mu0, pw0 = pipe.group_mean(0, arm)
    per_window = None
    if pw1 is not None:
        per_window = pd.DataFrame({"window": pw1.index.to_numpy(), "mu_g1": pw1.to_numpy(),
                                   "mu_g0": pw0.to_numpy()})
        per_window["psi"] = per_window["mu_g1"] - per_window["mu_g0"]
    return DisparityEstimate(arm.name, pipe.options.outcome_kind, mu1, mu0, arm.delta_mu, arm.delta_sigma,
                             per_window=per_window)


def estimate_effects(cohort: Cohort, arm_set: ArmSet, options: GcompOptions = GcompOptions(), *,
                     pipeline: GcompPipeline | None = None) -> list[DisparityEstimate]:
    """Estimates for every arm, with ``tau_effect = psi(arm) - psi(reference)``.

    All arms share one set of Step-1 fits and one set of record-keyed
    deviates, so the reference arm's effect is exactly zero.
    """
    pipe = pipeline or GcompPipeline.fit(cohort, options)
    raw = {arm.name: estimate_arm(cohort, arm, options, pipeline=pipe) for arm in arm_set}
    psi_ref = raw[arm_set.reference_name].psi
    out = []
    for arm in arm_set:
        est = raw[arm.name]
        out.append(replace(est, tau_effect=est.psi - psi_ref, is_reference=arm.name == arm_set.reference_name))
    return out


def observed_disparity(cohort: Cohort, outcome_kind: str, standardized: bool, *, k_form="linear",
                       k_bins=4, tau: float | None = None) -> DisparityEstimate:
    """Observed contrast before or after standardizing the allowables.

    Unstandardized: raw group means of the outcome (binary) or per-group
    Kaplan-Meier RMST (rmst). Standardized: Steps 3-5 with ``Q1`` set to the
    observed outcome or ``min(duration, tau)``.
    """
    if outcome_kind not in OUTCOME_KINDS:
        raise ConfigError(f"outcome_kind must be one of {OUTCOME_KINDS}")
    tau = float(tau if tau is not None else cohort.tau)
    frames = {g: _group_subset(cohort, g) for g in (0, 1)}

    def observed_q1(frame):
        if outcome_kind == "binary":
            return frame["outcome"].to_numpy(dtype=float)
        return np.minimum(frame["duration"].to_numpy(dtype=float), tau)

    means = {}
    if not standardized:
        for g, frame in frames.items():
            if outcome_kind == "binary":
                means[g] = float(frame["outcome"].mean())
            else:
                curve = survival.kaplan_meier(frame["duration"].to_numpy(), frame["event"].to_numpy())
                means[g] = survival.rmst(curve, tau)
        label = "unstandardized"
    else:
        design = DesignSpec.from_cohort(cohort, k_form, k_bins)
        std = cohort.standard_frame()
        if len(std) == 0:
            raise DataError("standard population is empty")
        std_design = design.matrix(std, standardization_terms(cohort), intercept=True)
        for g, frame in frames.items():
            fit3 = step3_standardize_fit(observed_q1(frame), frame, outcome_kind, design=design, cohort=cohort)
            means[g] = step5_marginalize(step4_predict_standard(fit3, std_design))
        label = "standardized"
    return DisparityEstimate(label, outcome_kind, means[1], means[0])
