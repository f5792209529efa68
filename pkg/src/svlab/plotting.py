"""Figures for per-round training records.

Inputs are lists of dicts keyed by :data:`svlab.loop.RECORD_FIELDS` (one
list per seed), as read back from the per-seed CSV files.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _column(rows, key):
    return np.array([float(r[key]) for r in rows])


def _updates(rows):
    return [int(r["round"]) for r in rows if str(r["target_updated"]).lower() in ("true", "1")]


def _band(ax, runs, key, label, color=None):
    curves = np.array([_column(r, key) for r in runs])
    x = _column(runs[0], "round")
    mid = np.nanmedian(curves, axis=0)
    (line,) = ax.plot(x, mid, label=label, color=color)
    if len(runs) > 1:
        lo, hi = np.nanpercentile(curves, [25, 75], axis=0)
        ax.fill_between(x, lo, hi, alpha=0.2, color=line.get_color())
    return line


def learning_curve(runs, path, optimum=None, baseline_runs=None, title="Four Rooms"):
    """Exact target and behavioral values per round, with target-update markers from the first seed."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 4))
    key = "v_target" if not math.isnan(float(runs[0][0]["v_target"])) else "mean_return"
    _band(ax, runs, key, "SV-PPO target")
    if key == "v_target":
        _band(ax, runs, "v_behavior", "SV-PPO behavioral")
    if baseline_runs:
        _band(ax, baseline_runs, key, "PPO", color="gray")
    for u in _updates(runs[0]):
        ax.axvline(u, color="k", alpha=0.12, lw=0.8)
    if optimum is not None:
        ax.axhline(optimum, color="k", ls="--", lw=1, label="optimal")
    ax.set_xlabel("round")
    ax.set_ylabel("V(s0)" if key == "v_target" else "mean discounted return")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def gate_trace(rows, path):
    """Scaled ``diff / y_bar`` against the threshold, one seed."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    x = _column(rows, "round")
    ax.plot(x, _column(rows, "scaled_diff"), label="diff / mean|y|")
    thr = float(rows[0]["threshold"])
    if math.isfinite(thr):
        ax.axhline(thr, color="r", ls="--", label="threshold")
    for u in _updates(rows):
        ax.axvline(u, color="k", alpha=0.12, lw=0.8)
    ax.set_yscale("log")
    ax.set_xlabel("round")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def dynamics(runs, path, baseline_runs=None):
    """Visitation TV between consecutive behavioral policies and the next-policy value error."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    for ax, key, label in ((axes[0], "tv_mu", "TV(mu_k, mu_k+1)"), (axes[1], "value_error_sq", "value error")):
        _band(ax, runs, key, "SV-PPO")
        if baseline_runs:
            _band(ax, baseline_runs, key, "PPO", color="gray")
        ax.set_yscale("log")
        ax.set_xlabel("round")
        ax.set_ylabel(label)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def render_all(runs, out_dir, optimum=None, baseline_runs=None, fmt="png"):
    """Write every figure into ``out_dir`` and return the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"learning_curve.{fmt}", out / f"gate_trace.{fmt}"]
    learning_curve(runs, paths[0], optimum, baseline_runs)
    gate_trace(runs[0], paths[1])
    if not math.isnan(float(runs[0][0]["tv_mu"])):
        paths.append(out / f"dynamics.{fmt}")
        dynamics(runs, paths[-1], baseline_runs)
    return paths
