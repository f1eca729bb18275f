from .impute import (
    GpConfig,
    ImputationResult,
    augment_patient,
    complete_patient,
    derive_seed,
    fit_channel_scalers,
    fit_patient,
    impute_cohort,
    load_fits,
    save_fits,
)
from .model import (
    GpBounds,
    GpFit,
    GpFitError,
    GpHyperparams,
    complete_trajectory,
    condition,
    fit_gp,
    heuristic_init,
    kernel_matrix,
    kernel_value,
    lml_gradient,
    log_marginal_likelihood,
    posterior,
    posterior_joint,
    sample_trajectory,
)

__all__ = [
    "GpBounds",
    "GpConfig",
    "GpFit",
    "GpFitError",
    "GpHyperparams",
    "ImputationResult",
    "augment_patient",
    "complete_patient",
    "complete_trajectory",
    "condition",
    "derive_seed",
    "fit_channel_scalers",
    "fit_gp",
    "fit_patient",
    "heuristic_init",
    "impute_cohort",
    "kernel_matrix",
    "kernel_value",
    "lml_gradient",
    "load_fits",
    "log_marginal_likelihood",
    "posterior",
    "posterior_joint",
    "sample_trajectory",
    "save_fits",
]
