"""Disparity estimation under simulated pulse-oximeter bias via g-computation."""

__version__ = "0.1.0"

from .bootstrap import BootstrapPlan, BootstrapResult, bootstrap_ci, replicate_cohort, resample_indices
from .cohort import (Cohort, Covariate, CovariateSchema, Record, apply_eligibility, assign_windows, describe,
                     load_cohort, overlap_flags, restrict_common_support, write_cohort)
from .errors import (ConfigError, ConvergenceError, DataError, MonotoneLikelihoodError, NumericalError,
                     RankDeficiencyError, SeparationError, TsttError)
from .gcomp import (DisparityEstimate, GcompOptions, GcompPipeline, estimate_arm, estimate_effects,
                    observed_disparity, step1_fit_outcome, step2_intervene_predict, step3_standardize_fit,
                    step4_predict_standard, step5_marginalize)
from .glm import GlmFit, fit_glm, predict
from .intervention import ArmSet, InterventionArm, RecordStreams, draw_spo2, role_swap, standard_arm_set
from .survival import CoxFit, SurvivalCurve, fit_cox, kaplan_meier, predict_survival, rmst
from .synthgen import SynthConfig, SynthTruth, generate_cohort, oracle_truth

__all__ = [
    "ArmSet", "BootstrapPlan", "BootstrapResult", "Cohort", "ConfigError", "ConvergenceError", "Covariate",
    "CovariateSchema", "CoxFit", "DataError", "DisparityEstimate", "GcompOptions", "GcompPipeline", "GlmFit",
    "InterventionArm", "MonotoneLikelihoodError", "NumericalError", "RankDeficiencyError", "Record",
    "RecordStreams", "SeparationError", "SurvivalCurve", "SynthConfig", "SynthTruth", "TsttError",
    "apply_eligibility", "assign_windows", "bootstrap_ci", "describe", "draw_spo2", "estimate_arm",
    "estimate_effects", "fit_cox", "fit_glm", "generate_cohort", "kaplan_meier", "load_cohort",
    "observed_disparity", "oracle_truth", "overlap_flags", "predict", "predict_survival", "replicate_cohort",
    "resample_indices", "restrict_common_support", "rmst", "role_swap", "standard_arm_set", "step1_fit_outcome",
    "step2_intervene_predict", "step3_standardize_fit", "step4_predict_standard", "step5_marginalize",
    "write_cohort",
]
