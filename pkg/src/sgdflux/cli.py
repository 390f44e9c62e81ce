"""Command-line front end: config ingestion, presets, deterministic seeding,
CSV/JSON emission and pass/fail acceptance checking.

Exit codes: 0 success, 1 check-mode threshold failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import applications as app
from . import dynamics as dyn
from . import report
from . import stationary as st
from .model import (
    InstabilityError,
    NoiseKind,
    NoiseSpec,
    OptimizerKind,
    OptimizerSpec,
    QuadraticProblem,
)

SCHEMA_VERSION = 1

EXPERIMENTS = ("predict", "simulate", "compare", "escape", "kramers",
               "bayes_lr", "stability", "ratio")

_CLI_OPTIMIZERS = ("sgd", "sgdm", "qhm")
_CLI_NOISES = ("isotropic", "hessian_aligned", "mixed", "explicit",
               "minibatch", "student_t", "chi_squared")
_SWEEPABLE = {"lr", "momentum", "nu", "rescale", "dim"}


# --- config validation ----------------------------------------------------


def _check_number(data, path, key, violations, *, minimum=None, maximum=None,
                  exclusive_min=None, required=True, integer=False):
    if key not in data:
        if required:
            violations.append(f"{path}.{key}: missing required field")
        return None
    value = data[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        violations.append(f"{path}.{key}: expected a number, got {type(value).__name__}")
        return None
    if integer and not isinstance(value, int):
        violations.append(f"{path}.{key}: expected an integer")
        return None
    if exclusive_min is not None and value <= exclusive_min:
        violations.append(f"{path}.{key}: must be > {exclusive_min}, got {value}")
    if minimum is not None and value < minimum:
        violations.append(f"{path}.{key}: must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        violations.append(f"{path}.{key}: must be <= {maximum}, got {value}")
    return value


def _validate_problem(data, violations):
    problem = data.get("problem")
    if not isinstance(problem, dict):
        violations.append("problem: missing or not an object")
        return
    if ("diagonal" in problem) == ("hessian" in problem):
        violations.append("problem: exactly one of 'diagonal'/'hessian' required")
        return
    if "diagonal" in problem:
        diag = problem["diagonal"]
        if not isinstance(diag, list) or not diag:
            violations.append("problem.diagonal: expected a non-empty list")
        elif any(not isinstance(v, (int, float)) or v <= 0 for v in diag):
            violations.append("problem.diagonal: entries must be positive numbers")
    else:
        h = problem["hessian"]
        try:
            arr = np.asarray(h, dtype=float)
            if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
                raise ValueError
            if np.linalg.eigvalsh(0.5 * (arr + arr.T))[0] <= 0.0:
                violations.append("problem.hessian: must be positive definite")
        except (ValueError, TypeError):
            violations.append("problem.hessian: expected a square numeric matrix")


def _validate_optimizer(data, violations):
    opt = data.get("optimizer")
    if not isinstance(opt, dict):
        violations.append("optimizer: missing or not an object")
        return
    kind = opt.get("kind")
    if kind not in _CLI_OPTIMIZERS:
        violations.append(f"optimizer.kind: must be one of {_CLI_OPTIMIZERS}, got {kind!r}")
    _check_number(opt, "optimizer", "lr", violations, exclusive_min=0.0)
    mu = _check_number(opt, "optimizer", "momentum", violations,
                       minimum=0.0, required=False)
    if mu is not None and mu >= 1.0:
        violations.append("optimizer.momentum: momentum must be in [0,1)")
    _check_number(opt, "optimizer", "nu", violations, minimum=0.0, maximum=1.0,
                  required=False)


def _validate_noise(data, violations):
    noise = data.get("noise")
    if not isinstance(noise, dict):
        violations.append("noise: missing or not an object")
        return
    kind = noise.get("kind")
    if kind not in _CLI_NOISES:
        violations.append(f"noise.kind: must be one of {_CLI_NOISES}, got {kind!r}")
        return
    if kind == "isotropic":
        _check_number(noise, "noise", "sigma2", violations, minimum=0.0)
    elif kind == "hessian_aligned":
        _check_number(noise, "noise", "scale", violations, minimum=0.0)
    elif kind == "mixed":
        _check_number(noise, "noise", "sigma2", violations, minimum=0.0)
        _check_number(noise, "noise", "scale", violations, minimum=0.0)
    elif kind == "explicit":
        if "covariance" not in noise:
            violations.append("noise.covariance: missing required field")
    elif kind == "minibatch":
        n = _check_number(noise, "noise", "n_data", violations, minimum=1, integer=True)
        s = _check_number(noise, "noise", "batch", violations, minimum=1, integer=True)
        if n is not None and s is not None and s > n:
            violations.append("noise.batch: must be <= noise.n_data")
    elif kind == "student_t":
        dof = _check_number(noise, "noise", "dof", violations)
        if dof is not None and dof <= 2.0:
            violations.append("noise.dof: student_t needs dof > 2 for finite variance")
        _check_number(noise, "noise", "sigma2", violations, minimum=0.0)
    elif kind == "chi_squared":
        _check_number(noise, "noise", "dof", violations, exclusive_min=0.0)
        _check_number(noise, "noise", "sigma2", violations, minimum=0.0)


def _validate_sweep(data, violations, allowed=_SWEEPABLE):
    sweep = data.get("sweep")
    if not isinstance(sweep, dict):
        violations.append("sweep: missing or not an object")
        return
    param = sweep.get("parameter")
    if param not in allowed:
        violations.append(f"sweep.parameter: must be one of {sorted(allowed)}, got {param!r}")
    grid = sweep.get("grid")
    if not isinstance(grid, list) or not grid:
        violations.append("sweep.grid: must be a non-empty list")
    elif any(not isinstance(v, (int, float)) for v in grid):
        violations.append("sweep.grid: entries must be numbers")


def validate_config(data) -> list:
    """Every schema violation, each tagged with its field path."""
    violations = []
    if not isinstance(data, dict):
        return ["config: expected a JSON object"]
    experiment = data.get("experiment")
    if experiment not in EXPERIMENTS:
        violations.append(f"experiment: must be one of {EXPERIMENTS}, got {experiment!r}")
        return violations
    if experiment in ("predict", "simulate", "compare"):
        _validate_problem(data, violations)
        _validate_optimizer(data, violations)
        _validate_noise(data, violations)
        _validate_sweep(data, violations, allowed={"lr", "momentum", "nu"})
        if experiment != "predict":
            _check_number(data, "config", "n_chains", violations, minimum=2, integer=True)
            _check_number(data, "config", "n_steps", violations, minimum=1, integer=True)
            _check_number(data, "config", "master_seed", violations, minimum=0, integer=True)
    elif experiment == "escape":
        _validate_problem(data, violations)
        _validate_noise(data, violations)
        _validate_sweep(data, violations, allowed={"lr"})
        _check_number(data, "config", "t_max", violations, minimum=1, integer=True)
        _check_number(data, "config", "n_runs", violations, minimum=2, integer=True)
        _check_number(data, "config", "master_seed", violations, minimum=0, integer=True)
    elif experiment == "kramers":
        _check_number(data, "config", "lr", violations, exclusive_min=0.0)
        _check_number(data, "config", "batch", violations, minimum=1, integer=True)
        _check_number(data, "config", "n_runs", violations, minimum=2, integer=True)
        _check_number(data, "config", "t_limit", violations, minimum=1, integer=True)
        _check_number(data, "config", "master_seed", violations, minimum=0, integer=True)
        _check_number(data, "config", "midpoint", violations, required=False)
        _validate_sweep(data, violations, allowed={"rescale"})
        sweep = data.get("sweep")
        lr = data.get("lr")
        if isinstance(sweep, dict) and isinstance(lr, (int, float)):
            grid = sweep.get("grid") or []
            for r in grid:
                if isinstance(r, (int, float)) and lr * 8.0 * r >= 2.0:
                    violations.append(
                        f"sweep.grid: rescale {r} makes lr*k_a = {lr * 8.0 * r:.3g} >= 2")
    elif experiment == "bayes_lr":
        _validate_problem(data, violations)
        n = _check_number(data, "config", "n_data", violations, minimum=1, integer=True)
        s = _check_number(data, "config", "batch", violations, minimum=1, integer=True)
        if n is not None and s is not None and s >= n:
            violations.append("batch: must be < n_data (no gradient noise otherwise)")
    elif experiment == "stability":
        _validate_problem(data, violations)
        _validate_optimizer(data, violations)
        _validate_sweep(data, violations, allowed={"lr", "momentum"})
    elif experiment == "ratio":
        _validate_sweep(data, violations, allowed={"dim"})
        _check_number(data, "config", "decay", violations, exclusive_min=0.5)
        _check_number(data, "config", "n_large", violations, minimum=1, integer=True)
        _check_number(data, "config", "k1", violations, exclusive_min=0.0)
    return violations


# --- builders -------------------------------------------------------------


def _build_problem(config) -> QuadraticProblem:
    problem = config["problem"]
    if "diagonal" in problem:
        return QuadraticProblem.from_diagonal(problem["diagonal"])
    return QuadraticProblem.create(np.asarray(problem["hessian"], dtype=float))


def _build_noise(config) -> NoiseSpec:
    noise = config["noise"]
    kind = noise["kind"]
    if kind == "isotropic":
        return NoiseSpec.isotropic(noise["sigma2"])
    if kind == "hessian_aligned":
        return NoiseSpec.hessian_aligned(noise["scale"])
    if kind == "mixed":
        return NoiseSpec.mixed(noise["sigma2"], noise["scale"])
    if kind == "explicit":
        return NoiseSpec.explicit(np.asarray(noise["covariance"], dtype=float))
    if kind == "minibatch":
        return NoiseSpec.minibatch(noise["n_data"], noise["batch"])
    if kind == "student_t":
        return NoiseSpec.student_t(noise["dof"], noise.get("sigma2", 1.0))
    if kind == "chi_squared":
        return NoiseSpec.chi_squared(noise["dof"], noise.get("sigma2", 1.0))
    raise ValueError(f"unknown noise kind {kind!r}")


def _build_optimizer(config, sweep_param=None, sweep_value=None) -> OptimizerSpec:
    opt = dict(config["optimizer"])
    if sweep_param in ("lr", "momentum", "nu"):
        opt[sweep_param] = sweep_value
    kind = opt["kind"]
    lr = opt["lr"]
    mu = opt.get("momentum", 0.0)
    nu = opt.get("nu", 1.0)
    if kind == "sgd":
        return OptimizerSpec.sgd(lr)
    if kind == "sgdm":
        return OptimizerSpec.sgdm(lr, mu)
    return OptimizerSpec.qhm(lr, mu, nu)


# --- compare / predict / simulate -----------------------------------------


def _predict_discrete(problem, c, optimizer: OptimizerSpec):
    if optimizer.kind == OptimizerKind.SGD:
        return st.solve_sgd_covariance(problem, c, optimizer.lr)
    if optimizer.kind == OptimizerKind.SGDM:
        return st.solve_sgdm_covariance(problem, c, optimizer.lr, optimizer.momentum)
    return st.solve_qhm_system(problem, c, optimizer.lr, optimizer.momentum,
                               optimizer.qhm_nu)


def _rel_error(empirical, predicted):
    denom = np.linalg.norm(predicted)
    if denom == 0.0:
        return float(np.linalg.norm(empirical))
    return float(np.linalg.norm(empirical - predicted) / denom)


def _mat_fields(prefix, mat, dim):
    if mat is None:
        return {f"{prefix}_{i}{j}": float("nan") for i in range(dim) for j in range(dim)}
    return {f"{prefix}_{i}{j}": float(mat[i, j]) for i in range(dim) for j in range(dim)}


def _compare_point(config, problem, noise_spec, value, master_seed, index,
                   simulate: bool, predict: bool):
    sweep_param = config["sweep"]["parameter"]
    optimizer = _build_optimizer(config, sweep_param, value)
    c = noise_spec.covariance_matrix(problem)
    check = st.stability_check(problem, lr=optimizer.lr, momentum=optimizer.momentum)
    row = {"sweep_value": value, "stable": check.stable, "margin": check.margin}
    dim = problem.dim
    sigma_d = None
    if predict:
        if check.stable:
            pred_d = _predict_discrete(problem, c, optimizer)
            sigma_d = pred_d.sigma
            pred_c = st.continuous_covariance(problem, c, optimizer.lr,
                                              optimizer.momentum)
            row.update(_mat_fields("pred_discrete", sigma_d, dim))
            row.update(_mat_fields("pred_continuous", pred_c.sigma, dim))
            row["train_error_discrete"] = pred_d.train_error
        else:
            row.update(_mat_fields("pred_discrete", None, dim))
            row.update(_mat_fields("pred_continuous", None, dim))
            row["train_error_discrete"] = float("nan")
    if simulate:
        n_chains = config["n_chains"]
        n_steps = config["n_steps"]
        if check.stable and check.margin > 0:
            n_steps = max(n_steps, int(math.ceil(20.0 / check.margin)))
        else:
            n_chains = min(n_chains, 1000)
        try:
            stats = dyn.run_ensemble(problem, optimizer, noise_spec, n_chains,
                                     n_steps, master_seed + index)
            row.update(_mat_fields("empirical", stats.empirical_cov, dim))
            row["n_diverged"] = stats.n_diverged
            row["n_chains"] = stats.n_chains
        except dyn.EmptyEnsembleError:
            row.update(_mat_fields("empirical", None, dim))
            row["n_diverged"] = n_chains
            row["n_chains"] = n_chains
        row["n_steps_used"] = n_steps
        if predict and sigma_d is not None and row["n_diverged"] < row["n_chains"]:
            emp = np.array([[row[f"empirical_{i}{j}"] for j in range(dim)]
                            for i in range(dim)])
            row["rel_error_discrete"] = _rel_error(emp, sigma_d)
            cont = np.array([[row[f"pred_continuous_{i}{j}"] for j in range(dim)]
                             for i in range(dim)])
            row["rel_error_continuous"] = _rel_error(emp, cont)
        else:
            row["rel_error_discrete"] = float("nan")
            row["rel_error_continuous"] = float("nan")
    return row


def _run_compare(config, master_seed, threads, simulate, predict):
    problem = _build_problem(config)
    noise_spec = _build_noise(config)
    grid = config["sweep"]["grid"]

    def worker(args):
        index, value = args
        return _compare_point(config, problem, noise_spec, value, master_seed,
                              index, simulate, predict)

    items = list(enumerate(grid))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(worker, items))
    else:
        rows = [worker(item) for item in items]
    summary = {"sweep_parameter": config["sweep"]["parameter"], "dim": problem.dim}
    return rows, summary


# --- other experiments ----------------------------------------------------


def _run_escape(config, master_seed, threads):
    problem = _build_problem(config)
    noise_spec = _build_noise(config)
    c = noise_spec.covariance_matrix(problem)
    t_max = config["t_max"]
    rows = []
    for index, lr in enumerate(config["sweep"]["grid"]):
        curve = dyn.escape_efficiency_empirical(problem, noise_spec, lr, t_max,
                                                config["n_runs"],
                                                master_seed + index)
        for t, value in zip(curve.times, curve.values):
            rows.append({
                "lr": lr,
                "t": int(t),
                "e_empirical": float(value),
                "e_discrete": app.escape_efficiency_discrete(problem.hessian, c, lr, int(t)),
                "e_continuous": app.escape_efficiency_continuous(problem.hessian, c, lr, int(t)),
                "n_diverged": curve.n_diverged,
            })
    return rows, {"t_max": t_max, "n_runs": config["n_runs"]}


def _run_kramers(config, master_seed, threads):
    lr = config["lr"]
    batch = config["batch"]
    midpoint = config.get("midpoint", 0.5)
    base = app.KramersSetting(k_a=8.0, k_b=-4.0, delta_l=1.0, lr=lr, batch=batch,
                              midpoint=midpoint)
    rows = []
    for index, r in enumerate(config["sweep"]["grid"]):
        measured = dyn.double_well_escape_experiment(
            r, lr, batch, config["n_runs"], config["t_limit"], master_seed + index)
        setting = base.rescaled(r)
        k_b_abs = abs(setting.k_b)
        rows.append({
            "rescale": r,
            "rate_measured_over_kb": measured.rate / k_b_abs,
            "rate_discrete_over_kb": app.kramers_rate_discrete(setting) / k_b_abs,
            "rate_continuous_over_kb": app.kramers_rate_continuous(setting) / k_b_abs,
            "n_escaped": measured.n_escaped,
            "n_runs": measured.n_runs,
            "censored": measured.censored,
        })
    measured_log = [math.log(r["rate_measured_over_kb"]) for r in rows
                    if r["rate_measured_over_kb"] > 0]
    predicted_log = [math.log(r["rate_discrete_over_kb"]) for r in rows
                     if r["rate_measured_over_kb"] > 0]
    summary = {}
    if len(measured_log) >= 2:
        summary["fit_constant"] = math.exp(
            float(np.mean(np.array(measured_log) - np.array(predicted_log))))
        summary["pearson_log"] = float(np.corrcoef(predicted_log, measured_log)[0, 1])
    cont = [r["rate_continuous_over_kb"] for r in rows]
    summary["continuous_r_invariant"] = bool(
        max(cont) - min(cont) <= 1e-12 * max(abs(cont[0]), 1e-300))
    return rows, summary


def _run_bayes(config, master_seed, threads):
    problem = _build_problem(config)
    setting = app.BayesSetting(hessian=problem.hessian, n_data=config["n_data"],
                               batch=config["batch"])
    lr_opt = app.optimal_bayes_lr(setting)
    estimate = app.small_lr_bayes_estimate(setting)
    sigma = app._bayes_sigma(setting, lr_opt)
    row = {
        "lr_opt": lr_opt,
        "equation_residual": app.bayes_lr_equation_residual(setting, lr_opt),
        "small_lr_estimate": estimate,
        "rel_gap_to_small_lr": abs(lr_opt - estimate) / estimate,
        "kl_at_opt": app.kl_divergence(sigma, setting.hessian, setting.n_data,
                                       setting.dim),
    }
    return [row], {}


def _run_stability(config, master_seed, threads):
    problem = _build_problem(config)
    sweep_param = config["sweep"]["parameter"]
    rows = []
    for value in config["sweep"]["grid"]:
        optimizer = _build_optimizer(config, sweep_param, value)
        check = st.stability_check(problem, lr=optimizer.lr,
                                   momentum=optimizer.momentum)
        row = {"sweep_value": value, "stable": check.stable, "margin": check.margin}
        if problem.dim == 1 and optimizer.momentum == 0.0:
            row["regime"] = st.classify_regime_1d(float(problem.hessian[0, 0]),
                                                  optimizer.lr).value
        rows.append(row)
    return rows, {"sweep_parameter": sweep_param}


def _run_ratio(config, master_seed, threads):
    rows = []
    for dim in config["sweep"]["grid"]:
        dim = int(dim)
        k = app.make_ill_conditioned_hessian(dim, config["decay"],
                                             config["n_large"], config["k1"])
        c = k / np.trace(k)
        ratio = app.efficiency_ratio(k, c)
        bound = app.efficiency_ratio_bound(k, c)
        rows.append({"dim": dim, "ratio": ratio, "bound": bound,
                     "bound_satisfied": ratio >= bound})
    return rows, {}


# --- check mode -----------------------------------------------------------


def _check_compare(rows, check, failures):
    tol = check.get("max_rel_error_discrete")
    if tol is not None:
        for row in rows:
            err = row.get("rel_error_discrete")
            if row.get("stable") and err is not None and math.isfinite(err) and err > tol:
                failures.append(
                    f"rel_error_discrete {err:.4f} > {tol} at sweep={row['sweep_value']}")
    cont = check.get("continuous_min_rel_error")
    if cont is not None:
        target = cont["sweep_value"]
        matched = [r for r in rows if abs(r["sweep_value"] - target) < 1e-12]
        if not matched:
            failures.append(f"continuous check: sweep value {target} not in grid")
        else:
            err = matched[0].get("rel_error_continuous", float("nan"))
            if not (err > cont["min"]):
                failures.append(
                    f"continuous rel_error {err:.4f} not > {cont['min']} at sweep={target}")
    diag = check.get("diag_rel_tol")
    if diag is not None:
        overrides = {float(k): v for k, v in check.get("diag_overrides", {}).items()}
        for row in rows:
            if not row.get("stable"):
                continue
            tol_here = overrides.get(float(row["sweep_value"]), diag)
            i = 0
            while f"pred_discrete_{i}{i}" in row:
                pred = row[f"pred_discrete_{i}{i}"]
                emp = row.get(f"empirical_{i}{i}")
                if emp is None or not math.isfinite(emp):
                    failures.append(f"missing empirical diagonal at sweep={row['sweep_value']}")
                    break
                err = abs(emp - pred) / abs(pred)
                if err > tol_here:
                    failures.append(
                        f"diagonal {i} rel error {err:.4f} > {tol_here} "
                        f"at sweep={row['sweep_value']}")
                i += 1
    diverge_at = check.get("diverge_at_or_below")
    if diverge_at is not None:
        for row in rows:
            if row["sweep_value"] <= diverge_at:
                diverged_enough = row.get("n_diverged", 0) >= 0.5 * row.get("n_chains", 1)
                if row.get("stable") and not diverged_enough:
                    failures.append(
                        f"expected divergence at sweep={row['sweep_value']} "
                        f"(stable={row['stable']}, n_diverged={row.get('n_diverged')})")
    match = check.get("match_range")
    if match is not None:
        lo, hi = match
        tol = check["match_rel_tol"]
        for row in rows:
            if lo <= row["sweep_value"] <= hi:
                err = row.get("rel_error_discrete")
                if err is None or not math.isfinite(err) or err > tol:
                    failures.append(
                        f"rel_error_discrete {err} > {tol} at sweep={row['sweep_value']} "
                        f"(match range [{lo}, {hi}])")


def _check_escape(rows, check, failures):
    tol = check.get("max_rel_error")
    if tol is None:
        return
    for row in rows:
        err = abs(row["e_empirical"] - row["e_discrete"]) / abs(row["e_discrete"])
        if err > tol:
            failures.append(
                f"escape rel error {err:.4f} > {tol} at lr={row['lr']}, t={row['t']}")


def _check_kramers(rows, summary, check, failures):
    if check.get("monotone"):
        measured = [r["rate_measured_over_kb"] for r in rows]
        if any(b <= a for a, b in zip(measured, measured[1:])):
            failures.append(f"measured rate/|k_b| not strictly increasing: {measured}")
    min_pearson = check.get("min_pearson")
    if min_pearson is not None:
        pearson = summary.get("pearson_log", float("nan"))
        if not (pearson > min_pearson):
            failures.append(f"log-space Pearson correlation {pearson} not > {min_pearson}")
    if check.get("continuous_r_invariant") and not summary.get("continuous_r_invariant"):
        failures.append("continuous rate/|k_b| is not r-invariant")


def _check_bayes(rows, check, failures):
    row = rows[0]
    tol = check.get("small_lr_rel_tol")
    if tol is not None and row["rel_gap_to_small_lr"] > tol:
        failures.append(
            f"optimal lr {row['lr_opt']:.6g} deviates {row['rel_gap_to_small_lr']:.3%} "
            f"from the small-lr estimate (tol {tol:.0%})")
    max_res = check.get("max_residual")
    if max_res is not None and abs(row["equation_residual"]) > max_res:
        failures.append(f"optimality-equation residual {row['equation_residual']:.3e} "
                        f"> {max_res}")


def _check_ratio(rows, check, failures):
    if check.get("require_bound"):
        for row in rows:
            if not row["bound_satisfied"]:
                failures.append(f"ratio {row['ratio']:.4f} below bound {row['bound']:.4f} "
                                f"at dim={row['dim']}")
    lin_tol = check.get("linear_growth_tol")
    if lin_tol is not None and len(rows) >= 2:
        for a, b in zip(rows, rows[1:]):
            expected = a["ratio"] * b["dim"] / a["dim"]
            err = abs(b["ratio"] - expected) / expected
            if err > lin_tol:
                failures.append(
                    f"ratio growth from dim {a['dim']} to {b['dim']} deviates "
                    f"{err:.2%} from linear (tol {lin_tol:.0%})")


def run_checks(experiment, rows, summary, check) -> list:
    failures = []
    if experiment in ("predict", "simulate", "compare"):
        _check_compare(rows, check, failures)
    elif experiment == "escape":
        _check_escape(rows, check, failures)
    elif experiment == "kramers":
        _check_kramers(rows, summary, check, failures)
    elif experiment == "bayes_lr":
        _check_bayes(rows, check, failures)
    elif experiment == "ratio":
        _check_ratio(rows, check, failures)
    return failures


# --- emission -------------------------------------------------------------


def _format_value(value):
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_rows_csv(rows, path) -> None:
    fieldnames = []
    for row in rows:
        for key in row:
            if key not in fieldnames:
                fieldnames.append(key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_format_value(row[k]) if k in row else "" for k in fieldnames])


def _json_safe(value):
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


# --- driver ---------------------------------------------------------------


_RUNNERS = {
    "predict": lambda cfg, seed, threads: _run_compare(cfg, seed, threads,
                                                       simulate=False, predict=True),
    "simulate": lambda cfg, seed, threads: _run_compare(cfg, seed, threads,
                                                        simulate=True, predict=False),
    "compare": lambda cfg, seed, threads: _run_compare(cfg, seed, threads,
                                                       simulate=True, predict=True),
    "escape": _run_escape,
    "kramers": _run_kramers,
    "bayes_lr": _run_bayes,
    "stability": _run_stability,
    "ratio": _run_ratio,
}


def run_experiment(config, out_dir, name, *, seed_override=None, threads=1,
                   check=False, figures=False) -> int:
    """Run one experiment config; write <name>.csv and <name>_summary.json.

    Returns the process exit code (0 ok, 1 check failure, 2 config error).
    """
    violations = validate_config(config)
    if violations:
        for violation in violations:
            print(f"config error: {violation}", file=sys.stderr)
        return 2
    experiment = config["experiment"]
    master_seed = config.get("master_seed", 0)
    if seed_override is not None:
        master_seed = seed_override
    config = dict(config)
    config["master_seed"] = master_seed
    try:
        rows, summary = _RUNNERS[experiment](config, master_seed, threads)
    except (InstabilityError, dyn.EmptyEnsembleError, app.NoOptimumError) as exc:
        print(f"experiment failed: {exc}", file=sys.stderr)
        return 2
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{name}.csv"
    write_rows_csv(rows, csv_path)
    check_result = None
    exit_code = 0
    if check:
        failures = run_checks(experiment, rows, summary, config.get("check", {}))
        check_result = {"passed": not failures, "failures": failures}
        status = "PASS" if not failures else "FAIL"
        print(f"[{status}] {name}")
        for failure in failures:
            print(f"  - {failure}")
        if failures:
            exit_code = 1
    summary_payload = {
        "schema_version": SCHEMA_VERSION,
        "experiment": experiment,
        "name": name,
        "master_seed": master_seed,
        "n_rows": len(rows),
        "csv": csv_path.name,
        "summary": _json_safe(summary),
    }
    if check_result is not None:
        summary_payload["check"] = check_result
    with open(out_dir / f"{name}_summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary_payload, fh, indent=2)
        fh.write("\n")
    if figures:
        fig_path = out_dir / f"{name}.png"
        report.render_figure(experiment, rows, fig_path,
                             sweep_name=config.get("sweep", {}).get("parameter", "sweep"),
                             dim=summary.get("dim", 1),
                             fit_constant=summary.get("fit_constant", 1.0))
    return exit_code


# --- presets and argument parsing -----------------------------------------


def preset_names() -> list:
    files = resources.files("sgdflux").joinpath("presets")
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_preset(name: str) -> dict:
    path = resources.files("sgdflux").joinpath("presets", f"{name}.json")
    if not path.is_file():
        raise FileNotFoundError(
            f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    with path.open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_config_arg(args):
    """Resolve --config/--preset into (config dict, name) or raise ValueError."""
    if (args.config is None) == (args.preset is None):
        raise ValueError("pass exactly one of --config PATH or --preset NAME")
    if args.preset is not None:
        return load_preset(args.preset), args.preset
    path = Path(args.config)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh), path.stem
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc


def _add_common(sub):
    sub.add_argument("--config", help="JSON experiment config")
    sub.add_argument("--preset", help="named built-in preset")
    sub.add_argument("--seed", type=int, default=None, help="override master seed")
    sub.add_argument("--out", default="out", help="output directory")
    sub.add_argument("--threads", type=int, default=1, help="sweep-point parallelism")
    sub.add_argument("--check", action="store_true",
                     help="apply the preset's acceptance tolerances; exit 1 on failure")
    sub.add_argument("--figures", action="store_true",
                     help="also render a figure next to the CSV output")


_SUBCOMMAND_EXPERIMENT = {
    "predict": "predict",
    "simulate": "simulate",
    "compare": "compare",
    "escape": "escape",
    "kramers": "kramers",
    "bayes-lr": "bayes_lr",
    "stability": "stability",
    "ratio": "ratio",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sgdflux",
        description="Stationary covariance of discrete-time SGD: predictions, "
                    "simulations and comparisons.")
    subs = parser.add_subparsers(dest="command", required=True)
    for command in _SUBCOMMAND_EXPERIMENT:
        sub = subs.add_parser(command)
        _add_common(sub)
    validate = subs.add_parser("validate", help="validate a config file")
    validate.add_argument("--config", help="JSON experiment config")
    validate.add_argument("--preset", help="named built-in preset")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "validate":
        try:
            config, name = _load_config_arg(args)
        except (ValueError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        violations = validate_config(config)
        if violations:
            for violation in violations:
                print(violation)
            return 2
        print("ok")
        return 0
    try:
        config, name = _load_config_arg(args)
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    expected = _SUBCOMMAND_EXPERIMENT[args.command]
    if config.get("experiment") != expected:
        print(f"error: config declares experiment {config.get('experiment')!r} "
              f"but subcommand is {args.command!r}", file=sys.stderr)
        return 2
    return run_experiment(config, args.out, name, seed_override=args.seed,
                          threads=max(1, args.threads), check=args.check,
                          figures=args.figures)


if __name__ == "__main__":
    sys.exit(main())
