"""Discrete-time simulators, noise samplers and Monte Carlo ensembles.

The ensemble machinery is the empirical oracle for every closed-form
prediction: chains are seeded per-chain with a splitmix64 mix of
(master_seed, chain_index) driving independent PCG64 generators, so the
results are bit-identical regardless of chunking or degree of parallelism.

Empirical covariance is the second moment about the optimum, E[w w^T] in
shifted coordinates, matching the stationary predictions (the stationary
mean is the optimum itself).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linalg import spd_sqrt
from .model import NoiseKind, NoiseSpec, OptimizerKind, OptimizerSpec, QuadraticProblem

__all__ = [
    "SCHEMA_VERSION",
    "DIVERGENCE_NORM",
    "ChainState",
    "ChainResult",
    "EnsembleStats",
    "NoiseSampler",
    "RegressionDataset",
    "EscapeCurve",
    "DoubleWellResult",
    "EmptyEnsembleError",
    "chain_seed",
    "chain_generator",
    "make_noise_sampler",
    "sample_noise",
    "step",
    "run_chain",
    "run_ensemble",
    "make_regression_dataset",
    "minibatch_gradient",
    "minibatch_noise_covariance",
    "run_regression_ensemble",
    "escape_efficiency_empirical",
    "double_well_escape_experiment",
    "write_trajectory_csv",
    "write_ensemble_json",
]

SCHEMA_VERSION = 1
DIVERGENCE_NORM = 1e12

_MASK64 = (1 << 64) - 1


class EmptyEnsembleError(RuntimeError):
    """Every chain in the ensemble diverged; no statistics available."""


def chain_seed(master_seed: int, chain_index: int) -> int:
    """splitmix64 mix of (master_seed, chain_index) -> 64-bit per-chain seed."""
    z = (master_seed + (chain_index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def chain_generator(master_seed: int, chain_index: int) -> np.random.Generator:
    """The per-chain generator: PCG64 seeded with the splitmix64 mix."""
    return np.random.Generator(np.random.PCG64(chain_seed(master_seed, chain_index)))


# --- noise sampling -------------------------------------------------------


@dataclass(frozen=True)
class NoiseSampler:
    """Maps unit draws to zero-mean samples with the spec's covariance."""

    spec: NoiseSpec
    dim: int
    factor: Optional[np.ndarray] = None  # square root of C for Gaussian kinds

    def sample_block(self, rng: np.random.Generator, n: int) -> np.ndarray:
        kind = self.spec.kind
        if kind == NoiseKind.STUDENT_T:
            scale = np.sqrt(self.spec.sigma2 * (self.spec.dof - 2.0) / self.spec.dof)
            return rng.standard_t(self.spec.dof, size=(n, self.dim)) * scale
        if kind == NoiseKind.CHI_SQUARED:
            scale = np.sqrt(self.spec.sigma2 / (2.0 * self.spec.dof))
            return (rng.chisquare(self.spec.dof, size=(n, self.dim)) - self.spec.dof) * scale
        if self.factor is None or not np.any(self.factor):
            return np.zeros((n, self.dim))
        return rng.standard_normal((n, self.dim)) @ self.factor

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.sample_block(rng, 1)[0]


def make_noise_sampler(spec: NoiseSpec, problem: QuadraticProblem) -> NoiseSampler:
    if spec.kind == NoiseKind.STATE_DEPENDENT:
        raise ValueError("state-dependent noise has no direct sampler; "
                         "simulate with the induced fixed covariance instead")
    if spec.kind in (NoiseKind.STUDENT_T, NoiseKind.CHI_SQUARED):
        return NoiseSampler(spec=spec, dim=problem.dim)
    c = spec.covariance_matrix(problem)
    return NoiseSampler(spec=spec, dim=problem.dim, factor=spd_sqrt(c))


def sample_noise(sampler: NoiseSampler, rng: np.random.Generator) -> np.ndarray:
    return sampler.sample(rng)


# --- single-chain stepping ------------------------------------------------


@dataclass(frozen=True)
class ChainState:
    """Parameters (shifted so the optimum is 0), momentum buffer, step count."""

    w: np.ndarray
    m: np.ndarray
    step: int
    diverged: bool = False

    @classmethod
    def initial(cls, w0) -> "ChainState":
        w0 = np.asarray(w0, dtype=float)
        return cls(w=w0, m=np.zeros_like(w0), step=0)


def _apply_update(w, m, grad, optimizer: OptimizerSpec):
    """One update of (w, m) given the (noisy) gradient; returns new (w, m)."""
    kind = optimizer.kind
    if kind == OptimizerKind.SGD:
        return w - optimizer.lr * grad, m
    if kind == OptimizerKind.SGDM:
        m = optimizer.momentum * m + grad
        return w - optimizer.lr * m, m
    if kind == OptimizerKind.QHM:
        mu, nu = optimizer.momentum, optimizer.qhm_nu
        m = mu * m + (1.0 - mu) * grad
        return w - optimizer.lr * ((1.0 - nu) * grad + nu * m), m
    # Fixed-preconditioner rules (DNM / NGD / idealized Adam).
    lam = optimizer.preconditioner
    if lam is None:
        raise ValueError(f"{kind.value} requires a preconditioner matrix")
    if optimizer.momentum > 0.0:
        m = optimizer.momentum * m + grad
        return w - m @ lam.T, m
    return w - grad @ lam.T, m


def step(state: ChainState, problem: QuadraticProblem, optimizer: OptimizerSpec,
         noise: np.ndarray) -> ChainState:
    """Exact discrete update; a diverged state is frozen in place."""
    if state.diverged:
        return state
    grad = problem.hessian @ state.w + np.asarray(noise, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        w, m = _apply_update(state.w, state.m, grad, optimizer)
    diverged = not np.all(np.isfinite(w)) or float(np.linalg.norm(w)) > DIVERGENCE_NORM
    if diverged:
        return ChainState(w=state.w, m=state.m, step=state.step + 1, diverged=True)
    return ChainState(w=w, m=m, step=state.step + 1)


@dataclass(frozen=True)
class ChainResult:
    final: ChainState
    recorded_steps: Optional[np.ndarray] = None
    trajectory: Optional[np.ndarray] = None  # (n_recorded, D)


def run_chain(problem: QuadraticProblem, optimizer: OptimizerSpec, noise_spec: NoiseSpec,
              n_steps: int, seed: int, record_every: int = 0,
              initial=None) -> ChainResult:
    """Single chain, deterministic given ``seed``; optional trajectory."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    sampler = make_noise_sampler(noise_spec, problem)
    rng = np.random.Generator(np.random.PCG64(seed))
    state = ChainState.initial(np.zeros(problem.dim) if initial is None else initial)
    steps_rec, traj = [], []
    for t in range(n_steps):
        state = step(state, problem, optimizer, sampler.sample(rng))
        if record_every > 0 and (t + 1) % record_every == 0:
            steps_rec.append(t + 1)
            traj.append(state.w.copy())
    if record_every > 0:
        return ChainResult(final=state, recorded_steps=np.array(steps_rec),
                           trajectory=np.array(traj))
    return ChainResult(final=state)


# --- vectorized ensembles -------------------------------------------------


@dataclass(frozen=True)
class EnsembleStats:
    n_chains: int
    n_steps: int
    empirical_mean: np.ndarray
    empirical_cov: np.ndarray  # second moment about the optimum
    n_diverged: int
    master_seed: int
    extras: dict = field(default_factory=dict)


def _update_block(w, m, eta, k, optimizer: OptimizerSpec):
    """Vectorized counterpart of _apply_update over a (chains, D) block."""
    grad = w @ k.T + eta
    kind = optimizer.kind
    if kind == OptimizerKind.SGD:
        return w - optimizer.lr * grad, m
    if kind == OptimizerKind.SGDM:
        m = optimizer.momentum * m + grad
        return w - optimizer.lr * m, m
    if kind == OptimizerKind.QHM:
        mu, nu = optimizer.momentum, optimizer.qhm_nu
        m = mu * m + (1.0 - mu) * grad
        return w - optimizer.lr * ((1.0 - nu) * grad + nu * m), m
    lam = optimizer.preconditioner
    if lam is None:
        raise ValueError(f"{kind.value} requires a preconditioner matrix")
    if optimizer.momentum > 0.0:
        m = optimizer.momentum * m + grad
        return w - m @ lam.T, m
    return w - grad @ lam.T, m


def run_ensemble(problem: QuadraticProblem, optimizer: OptimizerSpec,
                 noise_spec: NoiseSpec, n_chains: int, n_steps: int,
                 master_seed: int, chunk_size: int = 1024,
                 initial=None) -> EnsembleStats:
    """Final-state statistics over independent chains.

    Chains are processed in chunks for speed but each chain consumes only
    its own generator, so the output does not depend on chunk_size.
    """
    if n_chains < 2:
        raise ValueError("n_chains must be >= 2")
    sampler = make_noise_sampler(noise_spec, problem)
    d = problem.dim
    k = problem.hessian
    if initial is None:
        w_init = np.zeros(d)
    else:
        w_init = np.asarray(initial, dtype=float).reshape(d)
    finals = np.empty((n_chains, d))
    diverged = np.zeros(n_chains, dtype=bool)
    for start in range(0, n_chains, chunk_size):
        stop = min(start + chunk_size, n_chains)
        nc = stop - start
        noise = np.empty((nc, n_steps, d))
        for i in range(nc):
            rng = chain_generator(master_seed, start + i)
            noise[i] = sampler.sample_block(rng, n_steps)
        w = np.tile(w_init, (nc, 1))
        m = np.zeros((nc, d))
        alive = np.ones(nc, dtype=bool)
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(n_steps):
                w_new, m_new = _update_block(w, m, noise[:, t, :], k, optimizer)
                bad = alive & (~np.all(np.isfinite(w_new), axis=1)
                               | (np.einsum("ij,ij->i", np.where(np.isfinite(w_new), w_new, 0.0),
                                            np.where(np.isfinite(w_new), w_new, 0.0))
                                  > DIVERGENCE_NORM**2))
                keep = alive & ~bad
                w[keep] = w_new[keep]
                m[keep] = m_new[keep]
                alive = keep
                if not np.any(alive):
                    break
        finals[start:stop] = w
        diverged[start:stop] = ~alive
    good = ~diverged
    if not np.any(good):
        raise EmptyEnsembleError("all chains diverged")
    ws = finals[good]
    mean = ws.mean(axis=0)
    cov = ws.T @ ws / ws.shape[0]
    return EnsembleStats(
        n_chains=n_chains, n_steps=n_steps, empirical_mean=mean,
        empirical_cov=0.5 * (cov + cov.T), n_diverged=int(diverged.sum()),
        master_seed=master_seed,
    )


# --- minibatch linear regression ------------------------------------------


@dataclass(frozen=True)
class RegressionDataset:
    """Synthetic linear regression with loss L(w) = (1/N) sum (w.x_i - y_i)^2."""

    inputs: np.ndarray   # (N, D)
    targets: np.ndarray  # (N,)
    generating_w: np.ndarray
    label_noise_sd: float

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def empirical_hessian(self) -> np.ndarray:
        """K_hat = (2/N) sum x_i x_i^T, the Hessian of the full-batch loss."""
        x = self.inputs
        k = 2.0 / self.n * (x.T @ x)
        return 0.5 * (k + k.T)

    def full_gradient(self, w) -> np.ndarray:
        resid = self.inputs @ w - self.targets
        return 2.0 / self.n * (self.inputs.T @ resid)

    def minimizer(self) -> np.ndarray:
        sol, _, _, _ = np.linalg.lstsq(self.inputs, self.targets, rcond=None)
        return sol


def make_regression_dataset(n: int, d: int, input_cov, w_star, label_noise_sd: float,
                            seed: int) -> RegressionDataset:
    if n < d:
        raise ValueError("need n >= d for a non-singular empirical Hessian")
    rng = np.random.Generator(np.random.PCG64(seed))
    root = spd_sqrt(np.atleast_2d(np.asarray(input_cov, dtype=float)))
    x = rng.standard_normal((n, d)) @ root
    w_star = np.asarray(w_star, dtype=float).reshape(d)
    y = x @ w_star + label_noise_sd * rng.standard_normal(n)
    k = 2.0 / n * (x.T @ x)
    if np.linalg.eigvalsh(0.5 * (k + k.T))[0] <= 0.0:
        raise ValueError("empirical Hessian is singular; increase n or fix input_cov")
    return RegressionDataset(inputs=x, targets=y, generating_w=w_star,
                             label_noise_sd=label_noise_sd)


def minibatch_gradient(dataset: RegressionDataset, w, batch: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Gradient of the minibatch loss over ``batch`` indices drawn without replacement."""
    if not 1 <= batch <= dataset.n:
        raise ValueError("need 1 <= batch <= n")
    idx = rng.choice(dataset.n, size=batch, replace=False)
    x = dataset.inputs[idx]
    resid = x @ np.asarray(w, dtype=float) - dataset.targets[idx]
    return 2.0 / batch * (x.T @ resid)


def minibatch_noise_covariance(dataset: RegressionDataset, batch: int) -> np.ndarray:
    """Exact covariance of the minibatch gradient at the least-squares minimizer.

    Without-replacement sampling gives C = ((N-S)/((N-1) S)) * Cov_1 where
    Cov_1 is the single-sample gradient covariance at the minimizer; this
    is the K/S-style approximation with its finite-population correction.
    """
    n, s = dataset.n, batch
    w0 = dataset.minimizer()
    per_sample = 2.0 * dataset.inputs * (dataset.inputs @ w0 - dataset.targets)[:, None]
    mean = per_sample.mean(axis=0)
    centered = per_sample - mean
    cov1 = centered.T @ centered / n
    c = (n - s) / ((n - 1) * s) * cov1
    return 0.5 * (c + c.T)


def run_regression_ensemble(dataset: RegressionDataset, lr: float, batch: int,
                            n_chains: int, n_steps: int, master_seed: int,
                            momentum: float = 0.0) -> EnsembleStats:
    """Real minibatch SGD(M) chains on the regression loss, started at the minimizer.

    Statistics are about the least-squares minimizer, the stationary mean
    of the exact quadratic dynamics.
    """
    if n_chains < 2:
        raise ValueError("n_chains must be >= 2")
    w0 = dataset.minimizer()
    finals = np.empty((n_chains, dataset.dim))
    diverged = np.zeros(n_chains, dtype=bool)
    for i in range(n_chains):
        rng = chain_generator(master_seed, i)
        w = w0.copy()
        m = np.zeros(dataset.dim)
        ok = True
        for _ in range(n_steps):
            g = minibatch_gradient(dataset, w, batch, rng)
            if momentum > 0.0:
                m = momentum * m + g
                w = w - lr * m
            else:
                w = w - lr * g
            if not np.all(np.isfinite(w)) or np.linalg.norm(w) > DIVERGENCE_NORM:
                ok = False
                break
        finals[i] = w - w0
        diverged[i] = not ok
    good = ~diverged
    if not np.any(good):
        raise EmptyEnsembleError("all chains diverged")
    ws = finals[good]
    cov = ws.T @ ws / ws.shape[0]
    return EnsembleStats(
        n_chains=n_chains, n_steps=n_steps, empirical_mean=ws.mean(axis=0),
        empirical_cov=0.5 * (cov + cov.T), n_diverged=int(diverged.sum()),
        master_seed=master_seed,
    )


# --- escape experiments ---------------------------------------------------


@dataclass(frozen=True)
class EscapeCurve:
    times: np.ndarray
    values: np.ndarray  # E(t) = mean loss increase from the minimum
    n_runs: int
    n_diverged: int
    master_seed: int


def escape_efficiency_empirical(problem: QuadraticProblem, noise_spec: NoiseSpec,
                                lr: float, t_max: int, n_runs: int, master_seed: int,
                                record_every: int = 1,
                                chunk_size: int = 4096) -> EscapeCurve:
    """Mean loss increase E(t) for SGD started exactly at the minimum."""
    if t_max < 1 or n_runs < 2:
        raise ValueError("need t_max >= 1 and n_runs >= 2")
    sampler = make_noise_sampler(noise_spec, problem)
    k = problem.hessian
    d = problem.dim
    recorded = np.arange(record_every, t_max + 1, record_every)
    sums = np.zeros(recorded.size)
    counts = np.zeros(recorded.size)
    n_diverged = 0
    for start in range(0, n_runs, chunk_size):
        stop = min(start + chunk_size, n_runs)
        nc = stop - start
        noise = np.empty((nc, t_max, d))
        for i in range(nc):
            rng = chain_generator(master_seed, start + i)
            noise[i] = sampler.sample_block(rng, t_max)
        w = np.zeros((nc, d))
        alive = np.ones(nc, dtype=bool)
        rec_i = 0
        with np.errstate(over="ignore", invalid="ignore"):
            for t in range(1, t_max + 1):
                w_new = w - lr * (w @ k.T + noise[:, t - 1, :])
                finite = np.all(np.isfinite(w_new), axis=1)
                norms2 = np.einsum("ij,ij->i", np.where(finite[:, None], w_new, 0.0),
                                   np.where(finite[:, None], w_new, 0.0))
                newly_bad = alive & (~finite | (norms2 > DIVERGENCE_NORM**2))
                alive = alive & ~newly_bad
                w[alive] = w_new[alive]
                if rec_i < recorded.size and t == recorded[rec_i]:
                    losses = 0.5 * np.einsum("ij,jk,ik->i", w[alive], k, w[alive])
                    sums[rec_i] += losses.sum()
                    counts[rec_i] += alive.sum()
                    rec_i += 1
        n_diverged += int((~alive).sum())
    if np.any(counts == 0):
        raise EmptyEnsembleError("all chains diverged before the first record point")
    return EscapeCurve(times=recorded, values=sums / counts, n_runs=n_runs,
                       n_diverged=n_diverged, master_seed=master_seed)


@dataclass(frozen=True)
class DoubleWellResult:
    """First-passage statistics for the canonical rescaled double well."""

    rescale: float
    rate: float            # 1 / mean first-passage time over escaped runs
    mean_fpt: float
    n_escaped: int
    n_runs: int
    censored: bool         # True when some runs never crossed within t_limit
    barrier_curvature: float  # |k_b| = 4 * rescale
    master_seed: int


def double_well_escape_experiment(rescale: float, lr: float, batch: int,
                                  n_runs: int, t_limit: int,
                                  master_seed: int,
                                  block: int = 2048) -> DoubleWellResult:
    """Escape of SGD from a well of L(w) = rescale * (w^2 - 1)^2.

    Minima at w = +-1 with curvature k_a = 8*rescale, barrier top at 0
    with curvature k_b = -4*rescale and height rescale.  Gradient noise is
    Hessian-aligned at the minimum, variance k_a/batch.  Chains start at
    w = -1; first passage is the first step with w >= 0.
    """
    k_a = 8.0 * rescale
    if lr * k_a >= 2.0:
        raise ValueError(f"lr * k_a = {lr * k_a:.3g} >= 2: well itself is unstable")
    noise_sd = np.sqrt(k_a / batch)
    rngs = [chain_generator(master_seed, i) for i in range(n_runs)]
    w = np.full(n_runs, -1.0)
    fpt = np.full(n_runs, -1, dtype=np.int64)
    active = np.arange(n_runs)
    t = 0
    while active.size and t < t_limit:
        nsteps = min(block, t_limit - t)
        noise = np.stack([rngs[i].standard_normal(nsteps) for i in active])
        wa = w[active]
        crossed_at = np.full(active.size, -1, dtype=np.int64)
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(nsteps):
                grad = 4.0 * rescale * wa * (wa * wa - 1.0)
                wa = wa - lr * (grad + noise_sd * noise[:, j])
                hit = (crossed_at < 0) & (wa >= 0.0)
                crossed_at[hit] = t + j + 1
        w[active] = wa
        # Crossed chains are done; chains blown out of the quartic basin
        # on the far side are censored (counted as never escaping).
        done = (crossed_at >= 0) | ~np.isfinite(wa) | (np.abs(wa) > 1e9)
        fpt[active[done & (crossed_at >= 0)]] = crossed_at[done & (crossed_at >= 0)]
        active = active[~done]
        t += nsteps
    escaped = fpt >= 0
    n_escaped = int(escaped.sum())
    if n_escaped == 0:
        return DoubleWellResult(rescale=rescale, rate=0.0, mean_fpt=np.inf,
                                n_escaped=0, n_runs=n_runs, censored=True,
                                barrier_curvature=4.0 * rescale, master_seed=master_seed)
    mean_fpt = float(fpt[escaped].mean())
    return DoubleWellResult(rescale=rescale, rate=1.0 / mean_fpt, mean_fpt=mean_fpt,
                            n_escaped=n_escaped, n_runs=n_runs,
                            censored=n_escaped < n_runs,
                            barrier_curvature=4.0 * rescale, master_seed=master_seed)


# --- dumps ----------------------------------------------------------------


def write_trajectory_csv(path, chain_id: int, steps, trajectory) -> None:
    """CSV dump with columns chain_id, step, w_0..w_{D-1}."""
    trajectory = np.asarray(trajectory, dtype=float)
    d = trajectory.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain_id", "step"] + [f"w_{i}" for i in range(d)])
        for s, row in zip(steps, trajectory):
            writer.writerow([chain_id, int(s)] + [f"{v:.17g}" for v in row])


def write_ensemble_json(stats: EnsembleStats, path) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "n_chains": stats.n_chains,
        "n_steps": stats.n_steps,
        "n_diverged": stats.n_diverged,
        "master_seed": stats.master_seed,
        "empirical_mean": stats.empirical_mean.tolist(),
        "empirical_cov": stats.empirical_cov.tolist(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
