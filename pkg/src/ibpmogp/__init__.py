"""Convolved multi-output Gaussian processes with IBP-selected connectivity."""

from .kernels import (
    CholeskyFailure,
    CovBlocks,
    CriticalDamping,
    DegenerateDecay,
    KernelSpec,
    SingularPrecision,
    assemble_blocks,
    default_inducing,
)
from .state import (
    Dataset,
    ModelConfig,
    Priors,
    VariationalState,
    init_state,
    load_model,
    save_model,
)
from .elbo import ElboAux, NonFiniteElbo, compute_aux, compute_elbo
from .updates import sweep
from .hyperopt import FitReport, fit, scg_maximize
from .predict import predict, predictive_cov, predictive_mean
from .simulate import (
    gs_demo_fixture,
    msll,
    ode2_demo_fixture,
    sample_model,
    smse,
)

__version__ = "0.1.0"

__all__ = [
    "CholeskyFailure",
    "CovBlocks",
    "CriticalDamping",
    "Dataset",
    "DegenerateDecay",
    "ElboAux",
    "FitReport",
    "KernelSpec",
    "ModelConfig",
    "NonFiniteElbo",
    "Priors",
    "SingularPrecision",
    "VariationalState",
    "assemble_blocks",
    "compute_aux",
    "compute_elbo",
    "default_inducing",
    "fit",
    "gs_demo_fixture",
    "init_state",
    "load_model",
    "msll",
    "ode2_demo_fixture",
    "predict",
    "predictive_cov",
    "predictive_mean",
    "sample_model",
    "save_model",
    "scg_maximize",
    "smse",
    "sweep",
]
