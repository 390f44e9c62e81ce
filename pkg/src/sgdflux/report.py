"""Optional matplotlib rendering of experiment results.

Figures are a convenience layer over the CSV output: each render function
takes the same row dictionaries the CLI writes to CSV and draws the
predicted-vs-empirical comparison next to them.  Everything uses the Agg
backend so rendering works headless.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

__all__ = [
    "render_figure",
    "render_compare_figure",
    "render_escape_figure",
    "render_kramers_figure",
    "render_stability_figure",
    "render_ratio_figure",
]


def _finite_pairs(rows, x_key, y_key):
    xs, ys = [], []
    for row in rows:
        x, y = row.get(x_key), row.get(y_key)
        if x is None or y is None:
            continue
        if isinstance(y, float) and not math.isfinite(y):
            continue
        xs.append(x)
        ys.append(y)
    return xs, ys


def render_compare_figure(rows, path, sweep_name: str, dim: int) -> None:
    """Trace of leading covariance entry: empirical dots vs both predictions."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for key, style, label in [
        ("pred_discrete_00", "-", "prediction (discrete)"),
        ("pred_continuous_00", "--", "prediction (continuous)"),
    ]:
        xs, ys = _finite_pairs(rows, "sweep_value", key)
        if xs:
            ax.plot(xs, ys, style, label=label)
    xs, ys = _finite_pairs(rows, "sweep_value", "empirical_00")
    if xs:
        ax.plot(xs, ys, "o", ms=4, label="simulation")
    ax.set_xlabel(sweep_name)
    ax.set_ylabel("stationary variance (entry 0,0)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_escape_figure(rows, path) -> None:
    """E(t) per learning rate: empirical dots vs discrete/continuous curves."""
    fig, ax = plt.subplots(figsize=(6, 4))
    lrs = sorted({row["lr"] for row in rows})
    for lr in lrs:
        sub = [r for r in rows if r["lr"] == lr]
        ts = [r["t"] for r in sub]
        ax.plot(ts, [r["e_discrete"] for r in sub], "-", label=f"discrete, lr={lr:g}")
        ax.plot(ts, [r["e_continuous"] for r in sub], "--", label=f"continuous, lr={lr:g}")
        ax.plot(ts, [r["e_empirical"] for r in sub], "o", ms=3, label=f"simulation, lr={lr:g}")
    ax.set_xlabel("t")
    ax.set_ylabel("E(t)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_kramers_figure(rows, path, fit_constant: float = 1.0) -> None:
    """Escape rate over |k_b| vs landscape rescale factor, log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    rs = [r["rescale"] for r in rows]
    ax.semilogy(rs, [r["rate_measured_over_kb"] for r in rows], "o-", label="measured")
    ax.semilogy(rs, [fit_constant * r["rate_discrete_over_kb"] for r in rows],
                "-", label="discrete prediction (fitted constant)")
    ax.semilogy(rs, [r["rate_continuous_over_kb"] for r in rows],
                "--", label="continuous prediction")
    ax.set_xlabel("landscape rescale factor r")
    ax.set_ylabel("escape rate / |k_b|")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_stability_figure(rows, path, sweep_name: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 3))
    xs = [r["sweep_value"] for r in rows]
    ax.plot(xs, [r["margin"] for r in rows], "o-", label="stability margin")
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_xlabel(sweep_name)
    ax.set_ylabel("margin")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_ratio_figure(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ds = [r["dim"] for r in rows]
    ax.plot(ds, [r["ratio"] for r in rows], "o-", label="efficiency ratio")
    ax.plot(ds, [r["bound"] for r in rows], "--", label="lower bound")
    ax.set_xlabel("dimension")
    ax.set_ylabel("ratio")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_figure(experiment: str, rows, path, **kwargs) -> None:
    """Dispatch on experiment kind; unknown kinds are silently skipped."""
    if experiment in ("predict", "simulate", "compare"):
        render_compare_figure(rows, path, kwargs.get("sweep_name", "sweep"),
                              kwargs.get("dim", 1))
    elif experiment == "escape":
        render_escape_figure(rows, path)
    elif experiment == "kramers":
        render_kramers_figure(rows, path, kwargs.get("fit_constant", 1.0))
    elif experiment == "stability":
        render_stability_figure(rows, path, kwargs.get("sweep_name", "sweep"))
    elif experiment == "ratio":
        render_ratio_figure(rows, path)
