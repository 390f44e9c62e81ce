"""Stationary covariance of discrete-time SGD variants: exact predictions,
Monte Carlo simulation and the application calculators built on them."""

from . import applications, dynamics, linalg, model, stationary
from .model import (
    InstabilityError,
    NoiseKind,
    NoiseSpec,
    OptimizerKind,
    OptimizerSpec,
    QuadraticProblem,
    StationaryPrediction,
)
from .stationary import (
    adam_covariance,
    closed_form_commuting,
    continuous_covariance,
    dnm_covariance,
    mixed_noise_covariance,
    ngd_covariance,
    qhm_train_error,
    solve_preconditioned_covariance,
    solve_qhm_system,
    solve_sgd_covariance,
    solve_sgdm_covariance,
    stability_check,
    state_dependent_fixed_point,
    train_error_sgdm,
)

__all__ = [
    "applications",
    "dynamics",
    "linalg",
    "model",
    "stationary",
    "InstabilityError",
    "NoiseKind",
    "NoiseSpec",
    "OptimizerKind",
    "OptimizerSpec",
    "QuadraticProblem",
    "StationaryPrediction",
    "adam_covariance",
    "closed_form_commuting",
    "continuous_covariance",
    "dnm_covariance",
    "mixed_noise_covariance",
    "ngd_covariance",
    "qhm_train_error",
    "solve_preconditioned_covariance",
    "solve_qhm_system",
    "solve_sgd_covariance",
    "solve_sgdm_covariance",
    "stability_check",
    "state_dependent_fixed_point",
    "train_error_sgdm",
]

__version__ = "0.1.0"
