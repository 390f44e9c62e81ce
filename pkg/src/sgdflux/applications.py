"""Application calculators built on the stationary theory: Bayesian optimal
learning rate, escape efficiency, anisotropy efficiency ratio and Kramers
escape rates for a one-dimensional barrier crossing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import as_symmetric, sym_eigen
from .model import InstabilityError, QuadraticProblem

__all__ = [
    "BayesSetting",
    "KramersSetting",
    "NoOptimumError",
    "kl_divergence",
    "bayes_lr_equation_residual",
    "optimal_bayes_lr",
    "small_lr_bayes_estimate",
    "escape_efficiency_discrete",
    "escape_efficiency_continuous",
    "escape_probability_bound",
    "make_ill_conditioned_hessian",
    "efficiency_ratio",
    "efficiency_ratio_bound",
    "kramers_rate_discrete",
    "kramers_rate_continuous",
]


class NoOptimumError(RuntimeError):
    """The learning-rate optimality equation has no root in the stable range."""


@dataclass(frozen=True)
class BayesSetting:
    """Minibatch SGD viewed as approximate posterior sampling."""

    hessian: np.ndarray
    n_data: int
    batch: int

    def __post_init__(self):
        object.__setattr__(self, "hessian", as_symmetric(self.hessian))
        if not 1 <= self.batch <= self.n_data:
            raise ValueError("need 1 <= batch <= n_data")
        if np.linalg.eigvalsh(self.hessian)[0] <= 0.0:
            raise ValueError("hessian must be positive definite")

    @property
    def dim(self) -> int:
        return self.hessian.shape[0]


def kl_divergence(sigma, hessian, n_data: int, dim: int) -> float:
    """KL divergence of N(0, Sigma) from the Laplace posterior N(0, (N K)^-1).

    D_KL = (1/2) [N Tr(K Sigma) - ln|N K| - ln|Sigma| - D].
    """
    sigma = as_symmetric(sigma)
    k = as_symmetric(hessian)
    sign_s, logdet_s = np.linalg.slogdet(sigma)
    sign_k, logdet_k = np.linalg.slogdet(n_data * k)
    if sign_s <= 0.0:
        raise np.linalg.LinAlgError("sigma must be positive definite")
    if sign_k <= 0.0:
        raise np.linalg.LinAlgError("hessian must be positive definite")
    return 0.5 * (n_data * float(np.trace(k @ sigma)) - logdet_k - logdet_s - dim)


def _bayes_sigma(setting: BayesSetting, lr: float) -> np.ndarray:
    """Stationary covariance lr (N-S)/(N S) (2I - lr K)^-1 for minibatch-form noise."""
    m = (setting.n_data - setting.batch) / (setting.n_data * setting.batch)
    vals, vecs = sym_eigen(setting.hessian)
    diag = lr * m / (2.0 - lr * vals)
    return as_symmetric((vecs * diag) @ vecs.T)


def bayes_lr_equation_residual(setting: BayesSetting, lr: float) -> float:
    """Signed residual of the stationarity condition of D_KL in lr.

    f(lr) = (N-2S)/S sum_i k_i/(2 - lr k_i)
            + lr (N-S)/S sum_i k_i^2/(2 - lr k_i)^2 - D/lr;
    a root of f inside (0, 2/k_max) is a critical point of the divergence.
    """
    n, s = setting.n_data, setting.batch
    vals = sym_eigen(setting.hessian).eigenvalues
    term1 = (n - 2 * s) / s * np.sum(vals / (2.0 - lr * vals))
    term2 = lr * (n - s) / s * np.sum(vals**2 / (2.0 - lr * vals) ** 2)
    return float(term1 + term2 - setting.dim / lr)


def small_lr_bayes_estimate(setting: BayesSetting) -> float:
    """Small-learning-rate limit 2 (S/N) D / Tr[K] of the optimal rate."""
    return 2.0 * setting.batch / setting.n_data * setting.dim / float(
        np.trace(setting.hessian))


def optimal_bayes_lr(setting: BayesSetting, grid_points: int = 1000) -> float:
    """Learning rate minimizing the KL divergence to the Laplace posterior.

    Bisection on the stationarity condition inside (0, 2/k_max); if the
    endpoints do not bracket a sign change, the interval is scanned on a
    log-spaced grid and every bracketed root is refined, returning the one
    with the smallest divergence.
    """
    if setting.batch >= setting.n_data:
        raise ValueError("need batch < n_data (otherwise there is no gradient noise)")
    k_max = float(sym_eigen(setting.hessian).eigenvalues[0])
    hi_edge = 2.0 / k_max
    eps = 1e-8 * hi_edge
    lo, hi = eps, hi_edge - eps

    def refine(a, b):
        fa = bayes_lr_equation_residual(setting, a)
        for _ in range(200):
            mid = 0.5 * (a + b)
            fm = bayes_lr_equation_residual(setting, mid)
            if fm == 0.0 or (b - a) < 1e-16 * hi_edge:
                return mid
            if (fa < 0) == (fm < 0):
                a, fa = mid, fm
            else:
                b = mid
        return 0.5 * (a + b)

    f_lo = bayes_lr_equation_residual(setting, lo)
    f_hi = bayes_lr_equation_residual(setting, hi)
    roots = []
    if (f_lo < 0) != (f_hi < 0):
        roots.append(refine(lo, hi))
    else:
        grid = np.geomspace(lo, hi, grid_points)
        values = np.array([bayes_lr_equation_residual(setting, g) for g in grid])
        signs = np.sign(values)
        for i in np.flatnonzero(signs[:-1] * signs[1:] < 0):
            roots.append(refine(grid[i], grid[i + 1]))
    if not roots:
        raise NoOptimumError("no critical point of the KL divergence in (0, 2/k_max)")
    if len(roots) == 1:
        return roots[0]
    divergences = [
        kl_divergence(_bayes_sigma(setting, r), setting.hessian,
                      setting.n_data, setting.dim)
        for r in roots
    ]
    return roots[int(np.argmin(divergences))]


# --- escape efficiency ----------------------------------------------------


def escape_efficiency_discrete(hessian, noise_cov, lr: float, t) -> float:
    """Expected loss increase after t discrete SGD steps from the minimum.

    E_d(t) = (lr/4) Tr[(I - lr K/2)^-1 (I - (I - lr K)^(2t)) C];
    t = inf gives the limit (lr/2) Tr[(2I - lr K)^-1 C].
    """
    k = as_symmetric(hessian)
    c = as_symmetric(noise_cov)
    vals, vecs = sym_eigen(k)
    if lr * vals[0] >= 2.0:
        raise InstabilityError(f"lr * k_max = {lr * vals[0]:.3g} >= 2")
    c_diag = np.einsum("ij,ji->i", vecs.T @ c, vecs)
    if np.isinf(t):
        transient = np.ones_like(vals)
    else:
        t = int(t)
        if t < 0:
            raise ValueError("t must be >= 0")
        transient = 1.0 - (1.0 - lr * vals) ** (2 * t)
    return float(lr / 4.0 * np.sum(transient / (1.0 - lr * vals / 2.0) * c_diag))


def escape_efficiency_continuous(hessian, noise_cov, lr: float, t) -> float:
    """Continuous-time counterpart E_c(t) = (lr/4) Tr[(I - exp(-2 lr K t)) C]."""
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    k = as_symmetric(hessian)
    c = as_symmetric(noise_cov)
    vals, vecs = sym_eigen(k)
    c_diag = np.einsum("ij,ji->i", vecs.T @ c, vecs)
    if np.isinf(t):
        transient = np.ones_like(vals)
    else:
        if t < 0:
            raise ValueError("t must be >= 0")
        transient = 1.0 - np.exp(-2.0 * lr * vals * t)
    return float(lr / 4.0 * np.sum(transient * c_diag))


def escape_probability_bound(efficiency: float, barrier: float) -> float:
    """Markov bound min(E/barrier, 1) on the escape probability."""
    if barrier <= 0.0:
        raise ValueError("barrier must be positive")
    if efficiency < 0.0:
        raise ValueError("efficiency must be >= 0")
    return min(efficiency / barrier, 1.0)


# --- anisotropy efficiency ratio ------------------------------------------


def make_ill_conditioned_hessian(dim: int, decay: float, n_large: int,
                                 k1: float) -> np.ndarray:
    """Diagonal Hessian with n_large eigenvalues k1 and the rest k1 * D^-decay / 2.

    The small eigenvalues sit strictly below the k1 * D^-decay cutoff that
    defines the ill-conditioned class.  n_large = dim degenerates to k1 * I
    (no longer ill-conditioned).
    """
    if decay <= 0.5:
        raise ValueError("decay must exceed 1/2")
    if not 1 <= n_large <= dim:
        raise ValueError("need 1 <= n_large <= dim")
    if k1 <= 0.0:
        raise ValueError("k1 must be positive")
    small = k1 * dim ** (-decay) / 2.0
    return np.diag(np.concatenate([np.full(n_large, k1),
                                   np.full(dim - n_large, small)]))


def efficiency_ratio(hessian, noise_cov) -> float:
    """Tr[K C] / Tr[K C_bar] with C_bar the isotropic matrix of equal trace.

    The single-step escape efficiency is proportional to Tr[K C]; the
    ratio measures the speed-up of curvature-aligned noise over isotropic
    noise of the same magnitude.
    """
    k = as_symmetric(hessian)
    c = as_symmetric(noise_cov)
    trace_c = float(np.trace(c))
    if trace_c <= 0.0:
        raise ValueError("Tr[C] must be positive")
    d = k.shape[0]
    return float(np.trace(k @ c)) / (float(np.trace(k)) * trace_c / d)


def efficiency_ratio_bound(hessian, noise_cov) -> float:
    """Instance-computed lower bound a * D * k1^2 / Tr[K]^2 on the ratio.

    The alignment coefficient a = c1 Tr[K] <u1, v1>^2 / (k1 Tr[C]) is read
    off the instance: u1, v1 are the top eigenvectors of K and C, c1 the
    top eigenvalue of C.  For perfectly aligned instances a c1-weighted
    share of Tr[K C] already comes from the leading direction, which gives
    Tr[K C] >= a k1^2 Tr[C] / Tr[K] and hence the bound.
    """
    k = as_symmetric(hessian)
    c = as_symmetric(noise_cov)
    dk = sym_eigen(k)
    dc = sym_eigen(c)
    k1 = float(dk.eigenvalues[0])
    c1 = float(dc.eigenvalues[0])
    overlap = float(dk.eigenvectors[:, 0] @ dc.eigenvectors[:, 0]) ** 2
    trace_k = float(np.trace(k))
    trace_c = float(np.trace(c))
    a = c1 * trace_k * overlap / (k1 * trace_c)
    d = k.shape[0]
    return a * d * k1**2 / trace_k**2


# --- Kramers rates --------------------------------------------------------


@dataclass(frozen=True)
class KramersSetting:
    """One-dimensional barrier crossing: well curvature k_a, barrier
    curvature k_b < 0, barrier height delta_l, and the interpolation
    midpoint l of the escape path."""

    k_a: float
    k_b: float
    delta_l: float
    lr: float
    batch: int
    midpoint: float = 0.5

    def __post_init__(self):
        if self.k_a <= 0.0 or self.k_b >= 0.0:
            raise ValueError("need k_a > 0 and k_b < 0")
        if self.delta_l <= 0.0 or self.batch < 1 or self.lr <= 0.0:
            raise ValueError("need delta_l > 0, batch >= 1, lr > 0")
        if not 0.0 < self.midpoint < 1.0:
            raise ValueError("midpoint must be in (0, 1)")
        if self.lr * self.k_a >= 2.0:
            raise InstabilityError(f"lr * k_a = {self.lr * self.k_a:.3g} >= 2")

    def rescaled(self, r: float) -> "KramersSetting":
        """Landscape rescaled by r: curvatures and barrier height scale together."""
        return KramersSetting(k_a=r * self.k_a, k_b=r * self.k_b,
                              delta_l=r * self.delta_l, lr=self.lr,
                              batch=self.batch, midpoint=self.midpoint)


def kramers_rate_discrete(setting: KramersSetting) -> float:
    """Finite-learning-rate Kramers escape rate.

    gamma = |k_b|/(2 pi) sqrt(2/(2 - lr k_a))
            * erf(sqrt(S (2 - lr k_a) dL / (lr k_a)))
            * exp[-(2 S dL/lr) (l (1 - lr k_a/2)/k_a + (1 - l)/|k_b|)]
    """
    s = setting.batch
    lr = setting.lr
    k_a = setting.k_a
    k_b_abs = abs(setting.k_b)
    dl = setting.delta_l
    l = setting.midpoint
    two_minus = 2.0 - lr * k_a
    prefactor = k_b_abs / (2.0 * math.pi) * math.sqrt(2.0 / two_minus)
    erf_term = math.erf(math.sqrt(s * two_minus * dl / (lr * k_a)))
    exponent = -(2.0 * s * dl / lr) * (l * (1.0 - lr * k_a / 2.0) / k_a
                                       + (1.0 - l) / k_b_abs)
    return prefactor * erf_term * math.exp(exponent)


def kramers_rate_continuous(setting: KramersSetting) -> float:
    """Continuous-time rate gamma_c = |k_b|/(2 pi) exp[-(2 S dL/lr)(l/k_a + (1-l)/|k_b|)].

    gamma_c / |k_b| is exactly invariant under joint rescaling of
    (k_a, k_b, delta_l).
    """
    s = setting.batch
    k_b_abs = abs(setting.k_b)
    exponent = -(2.0 * s * setting.delta_l / setting.lr) * (
        setting.midpoint / setting.k_a + (1.0 - setting.midpoint) / k_b_abs)
    return k_b_abs / (2.0 * math.pi) * math.exp(exponent)


def problem_from_hessian(hessian) -> QuadraticProblem:
    """Convenience: wrap a bare Hessian as a QuadraticProblem."""
    return QuadraticProblem.create(hessian)
