"""Shared domain types: quadratic problem, optimizer and noise specifications."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .linalg import as_symmetric, sym_eigen

__all__ = [
    "OptimizerKind",
    "NoiseKind",
    "QuadraticProblem",
    "OptimizerSpec",
    "NoiseSpec",
    "StationaryPrediction",
    "InstabilityError",
]


class InstabilityError(RuntimeError):
    """No stationary distribution exists for the requested configuration."""


class OptimizerKind(str, Enum):
    SGD = "sgd"
    SGDM = "sgdm"
    QHM = "qhm"
    DNM = "dnm"
    NGD = "ngd"
    ADAM = "adam"


class NoiseKind(str, Enum):
    ISOTROPIC = "isotropic"
    HESSIAN_ALIGNED = "hessian_aligned"
    MIXED = "mixed"
    EXPLICIT = "explicit"
    MINIBATCH = "minibatch"
    STATE_DEPENDENT = "state_dependent"
    STUDENT_T = "student_t"
    CHI_SQUARED = "chi_squared"


@dataclass(frozen=True)
class QuadraticProblem:
    """Local quadratic loss L(w) = (w - optimum)^T K (w - optimum) / 2."""

    hessian: np.ndarray
    optimum: np.ndarray
    dim: int

    @classmethod
    def create(cls, hessian, optimum=None) -> "QuadraticProblem":
        k = as_symmetric(hessian)
        dim = k.shape[0]
        vals = sym_eigen(k).eigenvalues
        if vals[-1] <= 0.0:
            raise ValueError(f"hessian must be positive definite (min eigenvalue {vals[-1]:.3e})")
        if optimum is None:
            optimum = np.zeros(dim)
        optimum = np.asarray(optimum, dtype=float).reshape(dim)
        if not np.all(np.isfinite(optimum)):
            raise ValueError("optimum must be finite")
        return cls(hessian=k, optimum=optimum, dim=dim)

    @classmethod
    def from_diagonal(cls, diag) -> "QuadraticProblem":
        return cls.create(np.diag(np.asarray(diag, dtype=float)))

    @property
    def max_curvature(self) -> float:
        return float(sym_eigen(self.hessian).eigenvalues[0])


@dataclass(frozen=True)
class OptimizerSpec:
    """Update rule and hyperparameters.

    Exactly one of ``lr`` (scalar) or ``preconditioner`` (positive definite
    matrix) must be set.  ``momentum`` is the exponential accumulation
    coefficient; ``qhm_nu`` interpolates between plain SGD (0) and
    normalized momentum (1) and is only meaningful for QHM.
    """

    kind: OptimizerKind
    lr: Optional[float] = None
    preconditioner: Optional[np.ndarray] = None
    momentum: float = 0.0
    qhm_nu: float = 1.0

    def __post_init__(self):
        if (self.lr is None) == (self.preconditioner is None):
            raise ValueError("exactly one of lr/preconditioner must be set")
        if self.lr is not None and self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0,1)")
        if not 0.0 <= self.qhm_nu <= 1.0:
            raise ValueError("qhm_nu must be in [0,1]")
        if self.preconditioner is not None:
            object.__setattr__(self, "preconditioner", as_symmetric(self.preconditioner))

    @classmethod
    def sgd(cls, lr: float) -> "OptimizerSpec":
        return cls(OptimizerKind.SGD, lr=lr)

    @classmethod
    def sgdm(cls, lr: float, momentum: float) -> "OptimizerSpec":
        return cls(OptimizerKind.SGDM, lr=lr, momentum=momentum)

    @classmethod
    def qhm(cls, lr: float, momentum: float, nu: float) -> "OptimizerSpec":
        return cls(OptimizerKind.QHM, lr=lr, momentum=momentum, qhm_nu=nu)

    @classmethod
    def preconditioned(cls, kind: OptimizerKind, preconditioner, momentum: float = 0.0) -> "OptimizerSpec":
        return cls(kind, preconditioner=preconditioner, momentum=momentum)


@dataclass(frozen=True)
class NoiseSpec:
    """Gradient-noise model.

    kind selects the sampling law; the scale fields are interpreted per
    kind:

    - isotropic: covariance sigma2 * I
    - hessian_aligned: covariance a * K
    - mixed: covariance sigma2 * I + a * K
    - explicit: covariance matrix given directly
    - minibatch: Gaussian surrogate with covariance ((N-S)/(N S)) * K
    - student_t / chi_squared: iid per-coordinate non-Gaussian samples
      rescaled so the covariance is sigma2 * I
    """

    kind: NoiseKind
    sigma2: float = 0.0
    hessian_scale: float = 0.0
    covariance: Optional[np.ndarray] = None
    n_data: int = 0
    batch: int = 0
    dof: float = 0.0

    def __post_init__(self):
        if self.sigma2 < 0.0 or self.hessian_scale < 0.0:
            raise ValueError("noise scales must be >= 0")
        if self.kind == NoiseKind.MINIBATCH and not (1 <= self.batch <= self.n_data):
            raise ValueError("minibatch noise requires 1 <= batch <= n_data")
        if self.covariance is not None:
            object.__setattr__(self, "covariance", as_symmetric(self.covariance))

    @classmethod
    def isotropic(cls, sigma2: float) -> "NoiseSpec":
        return cls(NoiseKind.ISOTROPIC, sigma2=sigma2)

    @classmethod
    def hessian_aligned(cls, a: float) -> "NoiseSpec":
        return cls(NoiseKind.HESSIAN_ALIGNED, hessian_scale=a)

    @classmethod
    def mixed(cls, sigma2: float, a: float) -> "NoiseSpec":
        return cls(NoiseKind.MIXED, sigma2=sigma2, hessian_scale=a)

    @classmethod
    def explicit(cls, covariance) -> "NoiseSpec":
        return cls(NoiseKind.EXPLICIT, covariance=covariance)

    @classmethod
    def minibatch(cls, n_data: int, batch: int) -> "NoiseSpec":
        return cls(NoiseKind.MINIBATCH, n_data=n_data, batch=batch)

    @classmethod
    def student_t(cls, dof: float, sigma2: float = 1.0) -> "NoiseSpec":
        if dof <= 2.0:
            raise ValueError("student_t noise requires dof > 2 for finite variance")
        return cls(NoiseKind.STUDENT_T, dof=dof, sigma2=sigma2)

    @classmethod
    def chi_squared(cls, dof: float, sigma2: float = 1.0) -> "NoiseSpec":
        if dof <= 0.0:
            raise ValueError("chi_squared noise requires dof > 0")
        return cls(NoiseKind.CHI_SQUARED, dof=dof, sigma2=sigma2)

    def covariance_matrix(self, problem: QuadraticProblem) -> np.ndarray:
        """Target noise covariance C for this spec on the given problem."""
        d = problem.dim
        k = self.kind
        if k == NoiseKind.ISOTROPIC:
            return self.sigma2 * np.eye(d)
        if k == NoiseKind.HESSIAN_ALIGNED:
            return self.hessian_scale * problem.hessian
        if k == NoiseKind.MIXED:
            return self.sigma2 * np.eye(d) + self.hessian_scale * problem.hessian
        if k == NoiseKind.EXPLICIT:
            if self.covariance is None:
                raise ValueError("explicit noise needs a covariance matrix")
            return self.covariance
        if k == NoiseKind.MINIBATCH:
            scale = (self.n_data - self.batch) / (self.n_data * self.batch)
            return scale * problem.hessian
        if k in (NoiseKind.STUDENT_T, NoiseKind.CHI_SQUARED):
            return self.sigma2 * np.eye(d)
        raise ValueError(f"no constant covariance for noise kind {k}")


@dataclass(frozen=True)
class StationaryPrediction:
    """Predicted stationary covariance and derived quantities."""

    sigma: np.ndarray
    train_error: float
    stable: bool
    method: str  # "discrete" or "continuous"
    residual: float = 0.0
    extras: dict = field(default_factory=dict)
