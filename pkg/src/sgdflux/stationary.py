"""Exact stationary-covariance predictions for discrete-time SGD variants.

Each solver returns a ``StationaryPrediction`` whose ``sigma`` satisfies the
defining matrix equation of the corresponding update rule; ``residual`` is
the relative Frobenius residual of that equation, recomputed after the
solve.  The continuous-time baseline solves the Lyapunov equation
``Sigma K + K Sigma = lr * C / (1 - momentum)`` instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .linalg import (
    MatrixEquationTerm,
    UnstableConfigurationError,
    as_symmetric,
    commutator_norm,
    equation_residual,
    solve_linear_matrix_equation,
    spd_sqrt,
    sym_eigen,
)
from .model import InstabilityError, QuadraticProblem, StationaryPrediction

__all__ = [
    "Regime",
    "StabilityResult",
    "ConvergenceError",
    "stability_check",
    "classify_regime_1d",
    "continuous_covariance",
    "solve_sgd_covariance",
    "solve_sgdm_covariance",
    "closed_form_commuting",
    "mixed_noise_covariance",
    "solve_preconditioned_covariance",
    "train_error_sgdm",
    "solve_qhm_system",
    "qhm_train_error",
    "dnm_covariance",
    "ngd_covariance",
    "adam_covariance",
    "state_dependent_fixed_point",
    "effective_inverse_covariance",
    "sgd_equation_terms",
    "sgdm_equation_terms",
    "preconditioned_equation_terms",
]

_PSD_TOL = 1e-10


class ConvergenceError(RuntimeError):
    """Fixed-point iteration did not converge; carries the last residual."""

    def __init__(self, message: str, last_residual: float):
        super().__init__(message)
        self.last_residual = last_residual


class Regime(str, Enum):
    MONOTONE_CONVERGENT = "monotone_convergent"
    OSCILLATORY_CONVERGENT = "oscillatory_convergent"
    DIVERGENT = "divergent"


@dataclass(frozen=True)
class StabilityResult:
    stable: bool
    margin: float


def stability_check(problem: QuadraticProblem, lr: Optional[float] = None,
                    preconditioner=None, momentum: float = 0.0) -> StabilityResult:
    """Necessary stability condition lr * k_max < 2 * (1 + momentum).

    For a matrix learning rate the analogous operator condition is used:
    all eigenvalues of 2*(1+momentum)*I - Lambda @ K must be positive
    (checked on the symmetrized similarity transform).
    """
    if (lr is None) == (preconditioner is None):
        raise ValueError("pass exactly one of lr/preconditioner")
    if lr is not None:
        margin = 2.0 * (1.0 + momentum) - lr * problem.max_curvature
        return StabilityResult(stable=margin > 0.0, margin=margin)
    lam = as_symmetric(preconditioner)
    # Lambda K is similar to the symmetric Lambda^1/2 K Lambda^1/2.
    root = spd_sqrt(lam)
    sym_op = as_symmetric(root @ problem.hessian @ root)
    top = sym_eigen(sym_op).eigenvalues[0]
    margin = 2.0 * (1.0 + momentum) - float(top)
    return StabilityResult(stable=margin > 0.0, margin=margin)


def classify_regime_1d(k: float, lr: float) -> Regime:
    """Deterministic regimes of the noise-free 1d recursion w_t = (1-lr*k)^t w_0.

    Boundaries: lr == 1/k counts as oscillatory, lr == 2/k as divergent.
    """
    if k <= 0.0 or lr <= 0.0:
        raise ValueError("k and lr must be positive")
    if lr * k < 1.0:
        return Regime.MONOTONE_CONVERGENT
    if lr * k < 2.0:
        return Regime.OSCILLATORY_CONVERGENT
    return Regime.DIVERGENT


def _train_error(problem: QuadraticProblem, sigma: np.ndarray) -> float:
    return 0.5 * float(np.trace(problem.hessian @ sigma))


def _require_stability(problem: QuadraticProblem, lr: float, momentum: float):
    check = stability_check(problem, lr=lr, momentum=momentum)
    if not check.stable:
        raise InstabilityError(
            f"lr*k_max = {lr * problem.max_curvature:.6g} >= 2*(1+momentum) = "
            f"{2 * (1 + momentum):.6g}; no stationary distribution"
        )
    return check


def continuous_covariance(problem: QuadraticProblem, noise_cov, lr: float,
                          momentum: float = 0.0) -> StationaryPrediction:
    """Continuous-time (Ornstein-Uhlenbeck) baseline Sigma K + K Sigma = lr*C/(1-mu)."""
    c = as_symmetric(noise_cov)
    k = problem.hessian
    eye = np.eye(problem.dim)
    terms = [MatrixEquationTerm(eye, k), MatrixEquationTerm(k, eye)]
    rhs = lr / (1.0 - momentum) * c
    sigma = solve_linear_matrix_equation(terms, rhs)
    return StationaryPrediction(
        sigma=sigma,
        train_error=_train_error(problem, sigma),
        stable=True,
        method="continuous",
        residual=equation_residual(terms, sigma, rhs),
    )


def sgd_equation_terms(problem: QuadraticProblem, lr: float):
    """Terms of Sigma K + K Sigma - lr * K Sigma K = lr * C."""
    k = problem.hessian
    eye = np.eye(problem.dim)
    return [
        MatrixEquationTerm(eye, k),
        MatrixEquationTerm(k, eye),
        MatrixEquationTerm(k, k, -lr),
    ]


def solve_sgd_covariance(problem: QuadraticProblem, noise_cov, lr: float) -> StationaryPrediction:
    c = as_symmetric(noise_cov)
    _require_stability(problem, lr, 0.0)
    terms = sgd_equation_terms(problem, lr)
    rhs = lr * c
    sigma = solve_linear_matrix_equation(terms, rhs)
    return StationaryPrediction(
        sigma=sigma,
        train_error=_train_error(problem, sigma),
        stable=True,
        method="discrete",
        residual=equation_residual(terms, sigma, rhs),
    )


def sgdm_equation_terms(problem: QuadraticProblem, lr: float, momentum: float):
    """Terms of the momentum matrix equation (rhs = lr^2 * C).

    (1-mu)*lr*(K Sigma + Sigma K) + mu/(1-mu^2)*lr^2*(K^2 Sigma + Sigma K^2)
    - (1+mu^2)/(1-mu^2)*lr^2 * K Sigma K = lr^2 * C
    """
    k = problem.hessian
    k2 = k @ k
    eye = np.eye(problem.dim)
    mu = momentum
    c1 = (1.0 - mu) * lr
    c2 = mu / (1.0 - mu**2) * lr**2
    c3 = -(1.0 + mu**2) / (1.0 - mu**2) * lr**2
    return [
        MatrixEquationTerm(k, eye, c1),
        MatrixEquationTerm(eye, k, c1),
        MatrixEquationTerm(k2, eye, c2),
        MatrixEquationTerm(eye, k2, c2),
        MatrixEquationTerm(k, k, c3),
    ]


def solve_sgdm_covariance(problem: QuadraticProblem, noise_cov, lr: float,
                          momentum: float) -> StationaryPrediction:
    c = as_symmetric(noise_cov)
    _require_stability(problem, lr, momentum)
    terms = sgdm_equation_terms(problem, lr, momentum)
    rhs = lr**2 * c
    sigma = solve_linear_matrix_equation(terms, rhs)
    return StationaryPrediction(
        sigma=sigma,
        train_error=_train_error(problem, sigma),
        stable=True,
        method="discrete",
        residual=equation_residual(terms, sigma, rhs),
    )


def closed_form_commuting(problem: QuadraticProblem, noise_cov, lr: float,
                          momentum: float = 0.0) -> StationaryPrediction:
    """Closed form for commuting C and K, via the eigenbasis of K.

    Sigma = [lt*K (2I - lt*K)]^-1 lr^2 C / (1-mu^2) with lt = lr/(1+mu).
    """
    c = as_symmetric(noise_cov)
    k = problem.hessian
    denom = np.linalg.norm(c) * np.linalg.norm(k)
    if denom > 0.0 and commutator_norm(c, k) / denom > 1e-10:
        raise ValueError("closed_form_commuting requires [C, K] = 0")
    _require_stability(problem, lr, momentum)
    lt = lr / (1.0 + momentum)
    vals, vecs = sym_eigen(k)
    c_eig = vecs.T @ c @ vecs
    gain = lr**2 / ((1.0 - momentum**2) * lt * vals * (2.0 - lt * vals))
    sigma_eig = c_eig * gain[:, None]
    sigma = as_symmetric(vecs @ sigma_eig @ vecs.T)
    terms = sgdm_equation_terms(problem, lr, momentum)
    return StationaryPrediction(
        sigma=sigma,
        train_error=_train_error(problem, sigma),
        stable=True,
        method="discrete",
        residual=equation_residual(terms, sigma, lr**2 * c),
    )


def mixed_noise_covariance(problem: QuadraticProblem, sigma2: float, a: float,
                           lr: float) -> StationaryPrediction:
    """Sigma = lr (sigma2*I + a*K) [K (2I - lr K)]^-1 for mixed noise, mu = 0."""
    if sigma2 < 0.0 or a < 0.0:
        raise ValueError("noise scales must be >= 0")
    _require_stability(problem, lr, 0.0)
    vals, vecs = sym_eigen(problem.hessian)
    diag = lr * (sigma2 + a * vals) / (vals * (2.0 - lr * vals))
    sigma = as_symmetric((vecs * diag) @ vecs.T)
    c = sigma2 * np.eye(problem.dim) + a * problem.hessian
    terms = sgd_equation_terms(problem, lr)
    return StationaryPrediction(
        sigma=sigma,
        train_error=_train_error(problem, sigma),
        stable=True,
        method="discrete",
        residual=equation_residual(terms, sigma, lr * c),
    )


def preconditioned_equation_terms(problem: QuadraticProblem, preconditioner, momentum: float):
    """Terms of the matrix-learning-rate equation (rhs = Lambda C Lambda)."""
    k = problem.hessian
    lam = as_symmetric(preconditioner)
    mu = momentum
    eye = np.eye(problem.dim)
    lk = lam @ k
    lklk = lk @ lk
    return [
        MatrixEquationTerm(lk, eye, 1.0 - mu),
        MatrixEquationTerm(eye, lk.T, 1.0 - mu),
        MatrixEquationTerm(lk, lk.T, -(1.0 + mu**2) / (1.0 - mu**2)),
        MatrixEquationTerm(lklk, eye, mu / (1.0 - mu**2)),
        MatrixEquationTerm(eye, lklk.T, mu / (1.0 - mu**2)),
    ]


def solve_preconditioned_covariance(problem: QuadraticProblem, noise_cov,
                                    preconditioner, momentum: float = 0.0) -> StationaryPrediction:
    c = as_symmetric(noise_cov)
    lam = as_symmetric(preconditioner)
    terms = preconditioned_equation_terms(problem, lam, momentum)
    rhs = lam @ c @ lam
    sigma = solve_linear_matrix_equation(terms, rhs)
    scale = max(float(np.linalg.norm(sigma)), 1e-300)
    min_eig = sym_eigen(sigma).eigenvalues[-1]
    if min_eig < -_PSD_TOL * scale:
        raise InstabilityError(
            f"solved covariance is not PSD (min eigenvalue {min_eig:.3e}); "
            "stationary state does not exist"
        )
    return StationaryPrediction(
        sigma=sigma,
        train_error=_train_error(problem, sigma),
        stable=True,
        method="discrete",
        residual=equation_residual(terms, sigma, rhs),
    )


def train_error_sgdm(problem: QuadraticProblem, noise_cov, lr: float,
                     momentum: float = 0.0) -> float:
    """Closed-form stationary loss lr/(4(1-mu)) Tr[(I - lr K/(2(1+mu)))^-1 C].

    Evaluated in the eigenbasis of K, which is exact for any C.
    """
    c = as_symmetric(noise_cov)
    _require_stability(problem, lr, momentum)
    vals, vecs = sym_eigen(problem.hessian)
    c_diag = np.einsum("ij,ji->i", vecs.T @ c, vecs)
    weights = 1.0 / (1.0 - lr * vals / (2.0 * (1.0 + momentum)))
    return float(lr / (4.0 * (1.0 - momentum)) * np.sum(weights * c_diag))


# --- quasi-hyperbolic momentum -------------------------------------------
#
# Update rule: g = K w + eta; m <- mu m + (1-mu) g; w <- w - lr[(1-nu) g + nu m].
# Eliminating m gives the two-step recursion
#   w_t = P w_{t-1} - A w_{t-2} + beta eta_{t-2} - alpha eta_{t-1}
# with alpha = lr (1 - mu nu), beta = mu lr (1 - nu),
# P = (1+mu) I - alpha K, A = mu (I - lr (1-nu) K).
# Stationarity of the second moments yields a linear system in
# (Sigma, X, Q) where X = E[w_t w_{t-1}^T] and Q solves Q - A Q A = Sigma:
#   (1) Sigma - P Sigma P - A Sigma A + P X A + A X^T P
#          = (alpha^2 + beta^2) C - alpha beta (P C + C P)
#   (2) X + A X^T = (1+mu) Sigma - alpha K Sigma - alpha beta C
#   (3) Q - A Q A = Sigma
# The noise term in (2) comes from the correlation of eta_{t-2} with w_{t-1}.


def _qhm_coefficients(problem: QuadraticProblem, lr: float, momentum: float, nu: float):
    k = problem.hessian
    eye = np.eye(problem.dim)
    mu = momentum
    alpha = lr * (1.0 - nu + nu * (1.0 - mu))
    beta = mu * lr * (1.0 - nu)
    p = (1.0 + mu) * eye - alpha * k
    a = mu * (eye - lr * (1.0 - nu) * k)
    return alpha, beta, p, a


def _transpose_permutation(dim: int) -> np.ndarray:
    t = np.zeros((dim * dim, dim * dim))
    for i in range(dim):
        for j in range(dim):
            t[i * dim + j, j * dim + i] = 1.0
    return t


def solve_qhm_system(problem: QuadraticProblem, noise_cov, lr: float,
                     momentum: float, nu: float) -> StationaryPrediction:
    """Joint solve of the QHM stationary moment equations.

    Unknowns are (Sigma, X, Q) stacked into a 3*D^2 linear system; the
    extras carry the lagged cross-moment X, the geometric-series moment Q
    and the per-equation residuals.
    """
    c = as_symmetric(noise_cov)
    k = problem.hessian
    d = problem.dim
    mu = momentum
    if not 0.0 <= nu <= 1.0:
        raise ValueError("nu must be in [0, 1]")
    alpha, beta, p, a = _qhm_coefficients(problem, lr, mu, nu)
    rho_a = float(np.max(np.abs(sym_eigen(a).eigenvalues)))
    if rho_a >= 1.0:
        raise InstabilityError(f"momentum operator spectral radius {rho_a:.6f} >= 1")
    # Stability of the two-step recursion itself (block companion matrix).
    companion = np.block([[p, -a], [np.eye(d), np.zeros((d, d))]])
    rho = float(np.max(np.abs(np.linalg.eigvals(companion))))
    if rho >= 1.0:
        raise InstabilityError(f"QHM recursion spectral radius {rho:.6f} >= 1")

    eye2 = np.eye(d * d)
    tperm = _transpose_permutation(d)
    kron = np.kron

    # Row-major vec: vec(M X N) = kron(M, N^T) vec(X); P and A symmetric.
    blocks = np.zeros((3 * d * d, 3 * d * d))
    rhs = np.zeros(3 * d * d)
    sl = [slice(i * d * d, (i + 1) * d * d) for i in range(3)]

    # Equation (1): rows 0.
    blocks[sl[0], sl[0]] = eye2 - kron(p, p) - kron(a, a)
    blocks[sl[0], sl[1]] = kron(p, a) + kron(a, p) @ tperm
    rhs1 = (alpha**2 + beta**2) * c - alpha * beta * (p @ c + c @ p)
    rhs[sl[0]] = rhs1.ravel()

    # Equation (2): rows 1.
    blocks[sl[1], sl[0]] = alpha * kron(k, np.eye(d)) - (1.0 + mu) * eye2
    blocks[sl[1], sl[1]] = eye2 + kron(a, np.eye(d)) @ tperm
    rhs[sl[1]] = (-alpha * beta * c).ravel()

    # Equation (3): rows 2.
    blocks[sl[2], sl[0]] = -eye2
    blocks[sl[2], sl[2]] = eye2 - kron(a, a)

    cond = np.linalg.cond(blocks)
    if not np.isfinite(cond) or cond > 1e12:
        raise UnstableConfigurationError(
            f"QHM joint system is singular or ill-conditioned (cond ~ {cond:.3e})"
        )
    sol = np.linalg.solve(blocks, rhs)
    sigma = sol[sl[0]].reshape(d, d)
    x = sol[sl[1]].reshape(d, d)
    q = sol[sl[2]].reshape(d, d)
    sigma = as_symmetric(sigma, tol=1e-8)
    q = as_symmetric(q, tol=1e-8)

    def rel(lhs, target):
        denom = max(np.linalg.norm(target), np.linalg.norm(lhs), 1e-300)
        return float(np.linalg.norm(lhs - target) / denom)

    res1 = rel(sigma - p @ sigma @ p - a @ sigma @ a + p @ x @ a + a @ x.T @ p, rhs1)
    res2 = rel(x + a @ x.T, (1.0 + mu) * sigma - alpha * k @ sigma - alpha * beta * c)
    res3 = rel(q - a @ q @ a, sigma)
    scale = max(float(np.linalg.norm(sigma)), 1e-300)
    if sym_eigen(sigma).eigenvalues[-1] < -_PSD_TOL * scale:
        raise InstabilityError("QHM stationary covariance is not PSD")
    return StationaryPrediction(
        sigma=sigma,
        train_error=_train_error(problem, sigma),
        stable=True,
        method="discrete",
        residual=max(res1, res2, res3),
        extras={
            "cross_moment": x,
            "momentum_series": q,
            "residuals": {"covariance": res1, "cross_moment": res2, "series": res3},
        },
    )


def qhm_gain(k: np.ndarray | float, lr: float, momentum: float, nu: float):
    """Per-eigendirection stationary variance per unit noise variance.

    Scalar reduction of the QHM system: sigma(k) = c * g(k) with
    g(k) = [(alpha^2+beta^2)(1+a) - 2 alpha beta p] / [(1-a)((1+a)^2 - p^2)]
    where a = mu (1 - lr (1-nu) k) and p = (1+mu) - alpha k.
    """
    mu = momentum
    alpha = lr * (1.0 - nu + nu * (1.0 - mu))
    beta = mu * lr * (1.0 - nu)
    k = np.asarray(k, dtype=float)
    a = mu * (1.0 - lr * (1.0 - nu) * k)
    p = (1.0 + mu) - alpha * k
    num = (alpha**2 + beta**2) * (1.0 + a) - 2.0 * alpha * beta * p
    den = (1.0 - a) * ((1.0 + a) ** 2 - p**2)
    return num / den


def qhm_train_error(problem: QuadraticProblem, noise_cov, lr: float,
                    momentum: float, nu: float) -> float:
    """Stationary loss (lr^2/2) Tr[h(K)^-1 K C] with h from the scalar gain.

    h(k) := lr^2 / gain(k); evaluated as a matrix function of K in its
    eigenbasis, exact whenever [C, K] = 0 and for D = 1.
    """
    c = as_symmetric(noise_cov)
    vals, vecs = sym_eigen(problem.hessian)
    gains = qhm_gain(vals, lr, momentum, nu)
    if np.any(gains <= 0.0) or np.any(~np.isfinite(gains)):
        raise InstabilityError("h(K) is singular or negative: configuration unstable")
    c_diag = np.einsum("ij,ji->i", vecs.T @ c, vecs)
    return 0.5 * float(np.sum(vals * gains * c_diag))


def dnm_covariance(problem: QuadraticProblem, noise_cov, lr: float,
                   momentum: float = 0.0) -> StationaryPrediction:
    """Damped Newton (Lambda = lr K^-1): Sigma = (1+mu)/(1-mu) * lr/(2(1+mu)-lr) K^-1 C K^-1."""
    c = as_symmetric(noise_cov)
    mu = momentum
    if lr >= 2.0 * (1.0 + mu):
        raise InstabilityError(
            f"DNM requires lr < 2(1+momentum) = {2 * (1 + mu):.6g} (independent of K)"
        )
    k_inv = np.linalg.inv(problem.hessian)
    coeff = (1.0 + mu) / (1.0 - mu) * lr / (2.0 * (1.0 + mu) - lr)
    sigma = as_symmetric(coeff * k_inv @ c @ k_inv)
    lam = lr * k_inv
    terms = preconditioned_equation_terms(problem, lam, mu)
    return StationaryPrediction(
        sigma=sigma,
        train_error=_train_error(problem, sigma),
        stable=True,
        method="discrete",
        residual=equation_residual(terms, sigma, lam @ c @ lam),
    )


def _ngd_quadratic_residual(problem, sigma, lr, mu, c_kinv) -> float:
    ks = problem.hessian @ sigma
    lhs = ks @ ks - lr / (2.0 * (1.0 + mu)) * ks - lr / (2.0 * (1.0 - mu)) * c_kinv
    scale = max(np.linalg.norm(ks @ ks), lr / (2.0 * (1.0 + mu)) * np.linalg.norm(ks),
                lr / (2.0 * (1.0 - mu)) * np.linalg.norm(c_kinv), 1e-300)
    return float(np.linalg.norm(lhs) / scale)


def ngd_covariance(problem: QuadraticProblem, lr: float, momentum: float = 0.0,
                   noise_cov=None, n_data: Optional[int] = None,
                   batch: Optional[int] = None) -> StationaryPrediction:
    """Natural gradient descent (Lambda = lr * (K Sigma K)^-1).

    With minibatch-form noise C = ((N-S)/(N S)) K Sigma K (pass n_data and
    batch) the fluctuation is proportional to K^-1.  With a constant C the
    quadratic matrix equation
        (K Sigma)^2 - lr/(2(1+mu)) K Sigma - lr/(2(1-mu)) C K^-1 = 0
    is solved by a matrix square root, which requires [C, K] = 0.
    """
    if lr <= 0.0:
        raise ValueError("lr must be positive")
    mu = momentum
    k = problem.hessian
    k_inv = np.linalg.inv(k)
    if noise_cov is None:
        if n_data is None or batch is None:
            raise ValueError("pass either noise_cov or (n_data, batch)")
        if not 1 <= batch <= n_data:
            raise ValueError("need 1 <= batch <= n_data")
        m = (n_data - batch) / (n_data * batch)
        coeff = lr * ((1.0 + mu) * m + 1.0 - mu) / (2.0 * (1.0 - mu**2))
        sigma = as_symmetric(coeff * k_inv)
        c_kinv = m * k @ sigma  # C K^-1 with C = m K Sigma K
        residual = _ngd_quadratic_residual(problem, sigma, lr, mu, c_kinv)
    else:
        c = as_symmetric(noise_cov)
        denom = np.linalg.norm(c) * np.linalg.norm(k)
        if denom > 0.0 and commutator_norm(c, k) / denom > 1e-10:
            raise ValueError(
                "NGD closed form with constant noise requires [C, K] = 0; "
                "the matrix-square-root solution is invalid otherwise"
            )
        c_kinv = as_symmetric(c @ k_inv, tol=1e-8)
        q = spd_sqrt(lr**2 / (4.0 * (1.0 + mu) ** 2) * np.eye(problem.dim)
                     + 2.0 * lr / (1.0 - mu) * c_kinv)
        sigma = as_symmetric(0.5 * k_inv @ (q + lr / (2.0 * (1.0 + mu)) * np.eye(problem.dim)),
                             tol=1e-8)
        residual = _ngd_quadratic_residual(problem, sigma, lr, mu, c_kinv)
    return StationaryPrediction(
        sigma=sigma,
        train_error=_train_error(problem, sigma),
        stable=True,
        method="discrete",
        residual=residual,
    )


def adam_covariance(lr: float, noise_scale: float, dim: int,
                    hessian=None) -> StationaryPrediction:
    """Idealized Adam (Lambda = lr (K Sigma K + C)^-1/2, C = noise_scale * K Sigma K).

    Sigma = lr^2 (1 + noise_scale)/4 * I; the stationary loss needs the
    Hessian and defaults to K = I when none is given.
    """
    if lr <= 0.0 or noise_scale < 0.0:
        raise ValueError("lr must be positive and noise_scale >= 0")
    sigma = lr**2 * (1.0 + noise_scale) / 4.0 * np.eye(dim)
    if hessian is None:
        trace_k = float(dim)
    else:
        trace_k = float(np.trace(as_symmetric(hessian)))
    return StationaryPrediction(
        sigma=sigma,
        train_error=lr**2 * (1.0 + noise_scale) / 8.0 * trace_k,
        stable=True,
        method="discrete",
        residual=0.0,
    )


def state_dependent_fixed_point(
    problem: QuadraticProblem,
    noise_map: Callable[[np.ndarray], np.ndarray],
    lr: Optional[float] = None,
    momentum: float = 0.0,
    preconditioner_map: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iters: int = 10_000,
    initial=None,
) -> StationaryPrediction:
    """Self-consistent covariance for state-dependent noise C = C(Sigma).

    Damped Picard iteration Sigma <- (1-damping) Sigma + damping *
    Solve(C(Sigma)); the damping is halved whenever the fixed-point
    residual grows, which also handles strongly expansive maps such as the
    NGD minibatch form.  ``preconditioner_map`` makes the inner solve use
    a state-dependent matrix learning rate Lambda(Sigma) instead of the
    scalar ``lr``.
    """
    if preconditioner_map is None and lr is None:
        raise ValueError("need lr unless a preconditioner_map is given")

    def solve_step(sig):
        c = as_symmetric(noise_map(sig))
        if preconditioner_map is not None:
            lam = as_symmetric(preconditioner_map(sig))
            return solve_preconditioned_covariance(problem, c, lam, momentum)
        return solve_sgdm_covariance(problem, c, lr, momentum)

    if initial is None:
        current = np.linalg.inv(problem.hessian)
    else:
        current = as_symmetric(initial)
    previous_solved = None
    previous_residual = np.inf
    residual = np.inf
    safe_current = None
    for _ in range(max_iters):
        try:
            solved_pred = solve_step(current)
        except InstabilityError:
            # The blend overshot into a configuration with no stationary
            # state; retreat toward the last iterate that solved cleanly.
            if safe_current is None:
                raise
            damping = max(damping * 0.5, 1e-4)
            current = 0.5 * (current + safe_current)
            continue
        safe_current = current
        solved = solved_pred.sigma
        scale = max(np.linalg.norm(solved), 1.0)
        residual = float(np.linalg.norm(solved - current) / scale)
        if residual <= tol:
            return StationaryPrediction(
                sigma=solved, train_error=_train_error(problem, solved),
                stable=True, method="discrete", residual=solved_pred.residual,
                extras={"fixed_point_residual": residual},
            )
        if previous_solved is not None:
            # A noise map that ignores Sigma converges in one solve.
            if np.linalg.norm(solved - previous_solved) <= 1e-14 * scale:
                return StationaryPrediction(
                    sigma=solved, train_error=_train_error(problem, solved),
                    stable=True, method="discrete", residual=solved_pred.residual,
                    extras={"fixed_point_residual": residual},
                )
        if residual > previous_residual:
            damping = max(damping * 0.5, 1e-4)
        previous_residual = residual
        previous_solved = solved
        current = (1.0 - damping) * current + damping * solved
        min_eig = sym_eigen(current).eigenvalues[-1]
        if min_eig < -_PSD_TOL * max(np.linalg.norm(current), 1.0):
            raise InstabilityError("fixed-point iterate lost positive semidefiniteness")
    raise ConvergenceError(
        f"no fixed point within {max_iters} iterations (last residual {residual:.3e})",
        last_residual=residual,
    )


@dataclass(frozen=True)
class EffectiveInverse:
    """Inverse stationary covariance with its expansion in the K, K^2 basis."""

    inverse: np.ndarray
    hessian_coefficient: Optional[float] = None
    hessian_squared_coefficient: Optional[float] = None
    fit_residual: Optional[float] = None


def effective_inverse_covariance(prediction: StationaryPrediction,
                                 problem: Optional[QuadraticProblem] = None) -> EffectiveInverse:
    """Exact Sigma^-1 (quadratic form of the stationary log-density).

    When the problem is given, Sigma^-1 is least-squares fitted as
    c1 * K + c2 * K^2; for commuting white-noise solutions the fit is exact
    and c2 exposes the sign of the finite-learning-rate correction.
    """
    if not prediction.stable:
        raise InstabilityError("prediction is unstable; no stationary density")
    decomp = sym_eigen(prediction.sigma)
    if decomp.eigenvalues[-1] <= 0.0:
        raise np.linalg.LinAlgError("stationary covariance is singular")
    inv = as_symmetric(
        (decomp.eigenvectors / decomp.eigenvalues) @ decomp.eigenvectors.T
    )
    if problem is None:
        return EffectiveInverse(inverse=inv)
    k = problem.hessian
    basis = np.stack([k.ravel(), (k @ k).ravel()], axis=1)
    coeffs, _, _, _ = np.linalg.lstsq(basis, inv.ravel(), rcond=None)
    fit = (basis @ coeffs).reshape(inv.shape)
    fit_residual = float(np.linalg.norm(fit - inv) / max(np.linalg.norm(inv), 1e-300))
    return EffectiveInverse(
        inverse=inv,
        hessian_coefficient=float(coeffs[0]),
        hessian_squared_coefficient=float(coeffs[1]),
        fit_residual=fit_residual,
    )
