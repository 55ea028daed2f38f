"""Conditional mean imputation with resampling inference for longitudinal trials.

Missing outcomes are replaced by their conditional expectation under an
MMRM fitted by REML, with MAR or reference-based (CR, J2R, CIR) marginal
means; treatment effects come from an ANCOVA of the completed data and
standard errors from the jackknife or bootstrap.
"""

from .analysis import AncovaSpec, EffectEstimate, fit_ancova, ls_means
from .dataset import DataSchema, IceRecord, Strategy, Subject, TrialDataset, VisitGrid, load_csv, validate
from .impute import DeltaAdjustment, conditional_mean_impute, marginal_distribution
from .inference import (
    Pipeline,
    bootstrap,
    estimate_strategies,
    jackknife,
    pB_accuracy,
    run_pipeline,
)
from .mmrm import CovarianceSpec, FitOptions, MeanModelSpec, fit_reml
from .simgen import SimConfig, generate_trial, run_study

__all__ = [
    "AncovaSpec",
    "CovarianceSpec",
    "DataSchema",
    "DeltaAdjustment",
    "EffectEstimate",
    "FitOptions",
    "IceRecord",
    "MeanModelSpec",
    "Pipeline",
    "SimConfig",
    "Strategy",
    "Subject",
    "TrialDataset",
    "VisitGrid",
    "bootstrap",
    "conditional_mean_impute",
    "estimate_strategies",
    "fit_ancova",
    "fit_reml",
    "generate_trial",
    "jackknife",
    "load_csv",
    "ls_means",
    "marginal_distribution",
    "pB_accuracy",
    "run_pipeline",
    "run_study",
    "validate",
]
