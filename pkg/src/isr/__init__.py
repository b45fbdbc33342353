"""Invariant-feature subspace recovery (ISR-Mean / ISR-Cov) for linear domain generalization."""

__version__ = "0.1.0"

from isr.datamodel import (
    Dataset,
    EnvironmentSpec,
    EnvParams,
    LinearPredictor,
    oracle_predictor,
    population_moments,
    random_orthonormal_transform,
    sample_environment,
)
from isr.subspace import (
    SubspaceBasis,
    class_conditional_covariances,
    class_conditional_means,
    flag_mean,
    isr_cov,
    isr_cov_robust,
    isr_mean,
    principal_angles,
)
from isr.classify import (
    SolverConfig,
    compose_predictor,
    evaluate_error,
    fit_logistic,
    irmv1_fit,
    project_features,
    shrink_spurious,
)

__all__ = [
    "Dataset",
    "EnvironmentSpec",
    "EnvParams",
    "LinearPredictor",
    "SolverConfig",
    "SubspaceBasis",
    "class_conditional_covariances",
    "class_conditional_means",
    "compose_predictor",
    "evaluate_error",
    "fit_logistic",
    "flag_mean",
    "irmv1_fit",
    "isr_cov",
    "isr_cov_robust",
    "isr_mean",
    "oracle_predictor",
    "population_moments",
    "principal_angles",
    "project_features",
    "random_orthonormal_transform",
    "sample_environment",
    "shrink_spurious",
]
