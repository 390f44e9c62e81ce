"""Dense symmetric linear algebra and the small matrix-equation solvers.

Everything here works on plain ``numpy`` arrays.  Matrices are assumed
dense and small (D up to a few hundred); all matrix equations are solved
exactly by vectorizing to a D^2 x D^2 linear system.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "EIGEN_TOL",
    "RESIDUAL_TOL",
    "ASYMMETRY_TOL",
    "CONDITION_LIMIT",
    "MatrixEquationTerm",
    "EigenDecomposition",
    "NotSymmetricError",
    "NotPositiveSemidefiniteError",
    "UnstableConfigurationError",
    "DivergentSeriesError",
    "as_symmetric",
    "sym_eigen",
    "max_eigenvalue",
    "spectral_radius",
    "commutator_norm",
    "spd_sqrt",
    "discrete_lyapunov",
    "solve_linear_matrix_equation",
    "random_spd",
]

# Tolerances: eigendecompositions get full double-precision headroom,
# matrix-equation residuals two orders less; asymmetry beyond 1e-8 means
# the solve itself went wrong.
EIGEN_TOL = 1e-12
RESIDUAL_TOL = 1e-10
ASYMMETRY_TOL = 1e-8
CONDITION_LIMIT = 1e12


class NotSymmetricError(ValueError):
    pass


class NotPositiveSemidefiniteError(ValueError):
    pass


class UnstableConfigurationError(RuntimeError):
    """Vectorized system singular or condition number above CONDITION_LIMIT."""


class DivergentSeriesError(RuntimeError):
    """Discrete Lyapunov series does not converge (spectral radius >= 1)."""


def as_symmetric(matrix, tol: float = 1e-10) -> np.ndarray:
    """Validate symmetry and return an exactly symmetric float array.

    Raises NotSymmetricError if the relative asymmetry exceeds ``tol``.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = np.linalg.norm(m)
    asym = np.linalg.norm(m - m.T)
    if asym > tol * max(scale, 1.0):
        raise NotSymmetricError(
            f"matrix is not symmetric (relative asymmetry {asym / max(scale, 1e-300):.3e})"
        )
    return 0.5 * (m + m.T)


class EigenDecomposition(NamedTuple):
    """Eigenvalues sorted descending with matching orthonormal columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        v = self.eigenvectors
        return (v * self.eigenvalues) @ v.T


def sym_eigen(matrix) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending."""
    m = as_symmetric(matrix)
    vals, vecs = np.linalg.eigh(m)
    order = np.argsort(vals)[::-1]
    return EigenDecomposition(vals[order], vecs[:, order])


def max_eigenvalue(matrix) -> float:
    return float(sym_eigen(matrix).eigenvalues[0])


def spectral_radius(matrix) -> float:
    """Spectral radius of a general square matrix."""
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(matrix, dtype=float)))))


def commutator_norm(a, b) -> float:
    """Frobenius norm of the commutator AB - BA."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a @ b - b @ a))


def spd_sqrt(matrix, tol: float = 1e-12) -> np.ndarray:
    """Symmetric PSD square root R with R @ R == M.

    Eigenvalues below -tol raise NotPositiveSemidefiniteError; small
    negative round-off is clipped to zero.
    """
    decomp = sym_eigen(matrix)
    vals = decomp.eigenvalues
    scale = max(abs(vals[0]), 1.0)
    if vals[-1] < -tol * scale:
        raise NotPositiveSemidefiniteError(
            f"matrix has negative eigenvalue {vals[-1]:.3e}"
        )
    root = np.sqrt(np.clip(vals, 0.0, None))
    v = decomp.eigenvectors
    return as_symmetric((v * root) @ v.T)


@dataclass(frozen=True)
class MatrixEquationTerm:
    """One summand ``coefficient * left @ X @ right`` of a linear matrix equation."""

    left: np.ndarray
    right: np.ndarray
    coefficient: float = 1.0

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.coefficient * (self.left @ x @ self.right)


def _vectorized_operator(terms: Sequence[MatrixEquationTerm], dim: int) -> np.ndarray:
    # Row-major vec: vec(L X R) = kron(L, R^T) vec(X).
    op = np.zeros((dim * dim, dim * dim))
    for term in terms:
        left = np.asarray(term.left, dtype=float)
        right = np.asarray(term.right, dtype=float)
        if left.shape != (dim, dim) or right.shape != (dim, dim):
            raise ValueError("term dimensions do not match the right-hand side")
        op += term.coefficient * np.kron(left, right.T)
    return op


def equation_residual(terms: Sequence[MatrixEquationTerm], x: np.ndarray, rhs: np.ndarray) -> float:
    """Relative Frobenius residual of sum_i c_i L_i X R_i = rhs."""
    acc = np.zeros_like(np.asarray(rhs, dtype=float))
    for term in terms:
        acc += term.apply(x)
    denom = np.linalg.norm(rhs)
    if denom == 0.0:
        denom = max(np.linalg.norm(acc), 1e-300)
    return float(np.linalg.norm(acc - rhs) / denom)


def solve_linear_matrix_equation(
    terms: Sequence[MatrixEquationTerm],
    rhs,
    symmetrize: bool | None = None,
) -> np.ndarray:
    """Solve sum_i c_i * L_i @ X @ R_i = rhs for X by dense vectorization.

    ``symmetrize=None`` symmetrizes the solution when ``rhs`` is symmetric,
    guarded by an asymmetry check: a solution whose asymmetry exceeds
    ASYMMETRY_TOL means the equation was not symmetry-preserving and an
    UnstableConfigurationError is raised instead of silently averaging.
    """
    rhs = np.asarray(rhs, dtype=float)
    if rhs.ndim != 2 or rhs.shape[0] != rhs.shape[1]:
        raise ValueError(f"rhs must be square, got shape {rhs.shape}")
    dim = rhs.shape[0]
    op = _vectorized_operator(terms, dim)
    cond = np.linalg.cond(op)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise UnstableConfigurationError(
            f"vectorized system is singular or ill-conditioned (cond ~ {cond:.3e})"
        )
    x = np.linalg.solve(op, rhs.ravel()).reshape(dim, dim)
    if symmetrize is None:
        symmetrize = bool(np.allclose(rhs, rhs.T, rtol=0.0, atol=1e-12 * max(np.linalg.norm(rhs), 1.0)))
    if symmetrize:
        scale = max(np.linalg.norm(x), 1e-300)
        asym = np.linalg.norm(x - x.T) / scale
        if asym > ASYMMETRY_TOL:
            raise UnstableConfigurationError(
                f"solution asymmetry {asym:.3e} exceeds {ASYMMETRY_TOL}; "
                "equation is not symmetry-preserving"
            )
        x = 0.5 * (x + x.T)
    return x


def discrete_lyapunov(a, s) -> np.ndarray:
    """Solve Q - A Q A^T = S.  Requires spectral radius of A below one.

    Equals the convergent series sum_i A^i S (A^T)^i.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    s = np.asarray(s, dtype=float)
    if s.ndim == 0:
        s = s.reshape(1, 1)
    rho = spectral_radius(a)
    if rho >= 1.0:
        raise DivergentSeriesError(f"spectral radius {rho:.6f} >= 1; series diverges")
    dim = a.shape[0]
    terms = [
        MatrixEquationTerm(np.eye(dim), np.eye(dim), 1.0),
        MatrixEquationTerm(a, a.T, -1.0),
    ]
    return solve_linear_matrix_equation(terms, s, symmetrize=None)


def random_spd(dim: int, rng: np.random.Generator, eps: float = 1e-3) -> np.ndarray:
    """Random symmetric positive definite matrix B^T B + eps*I (test helper)."""
    b = rng.standard_normal((dim, dim))
    return as_symmetric(b.T @ b + eps * np.eye(dim))
