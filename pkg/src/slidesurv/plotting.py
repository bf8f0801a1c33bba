"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GROUP_COLORS = {"high": "#c0392b", "low": "#27ae60"}


def plot_settings():
    plt.rcParams["lines.linewidth"] = 1.6
    plt.rcParams["font.size"] = 10
    plt.rcParams["axes.titlesize"] = 11
    plt.rcParams["axes.labelsize"] = 10
    plt.rcParams["legend.fontsize"] = 9
    plt.rcParams["axes.spines.top"] = False
    plt.rcParams["axes.spines.right"] = False


def _save(fig, path, provenance=None):
    meta = {"Software": "slidesurv"}
    if provenance is not None:
        meta["Description"] = json.dumps(provenance, sort_keys=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=meta)
    plt.close(fig)


def _step_xy(curve, t_end):
    x = np.concatenate([[0.0], np.repeat(curve.times, 2), [t_end]])
    y = np.concatenate([np.repeat(np.concatenate([[1.0], curve.surv]), 2)])
    return x, y


def plot_km(curves, path, logrank=None, time_label="time", provenance=None):
    """Kaplan-Meier step curves; ``curves`` maps group name -> (KMCurve, times)."""
    plot_settings()
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    for name, (curve, times) in curves.items():
        x, y = _step_xy(curve, float(np.max(times)))
        ax.plot(x, y, color=GROUP_COLORS.get(name), label=f"{name} risk (n={len(times)})")
    if logrank is not None:
        ax.text(0.02, 0.04, f"log-rank p = {logrank.p_value:.3g}", transform=ax.transAxes)
    ax.set_xlabel(time_label)
    ax.set_ylabel("survival probability")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper right", frameon=False)
    _save(fig, path, provenance)


def plot_survival_curves(grid, spf, path, labels=None, max_curves=30, time_label="time", provenance=None):
    plot_settings()
    fig, ax = plt.subplots(figsize=(5.5, 3.8))
    spf = np.atleast_2d(spf)
    for i, row in enumerate(spf[:max_curves]):
        ax.plot(grid, row, lw=0.9, alpha=0.7, label=None if labels is None else labels[i])
    ax.set_xlabel(time_label)
    ax.set_ylabel("predicted survival")
    ax.set_ylim(-0.02, 1.02)
    if labels is not None and len(spf) <= 8:
        ax.legend(frameon=False)
    _save(fig, path, provenance)


def plot_losses(histories, path, provenance=None):
    """Per-epoch training loss for each fold."""
    plot_settings()
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for fold, losses in histories.items():
        ax.plot(np.arange(1, len(losses) + 1), losses, marker="o", ms=3, label=f"fold {fold}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    ax.legend(frameon=False)
    _save(fig, path, provenance)
