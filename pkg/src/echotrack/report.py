"""Figure rendering for evaluation reports.

Everything here is presentation only; numbers come from metrics.py.  Figures
are written next to the delimited output so a report directory is
self-contained.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .pose import Trajectory, propagate_corners


def render_trajectory_figure(pred: Trajectory, gt: Trajectory, plane_extent,
                             path) -> Path:
    """3D plot of predicted vs ground-truth frame-center paths."""
    pc = propagate_corners(pred, plane_extent).mean(axis=1)
    gc = propagate_corners(gt, plane_extent).mean(axis=1)
    fig = plt.figure(figsize=(7, 6))
    ax = fig.add_subplot(projection="3d")
    ax.plot(*gc.T, label="ground truth", color="tab:gray", lw=2)
    ax.plot(*pc.T, label="predicted", color="tab:blue", lw=1.5)
    ax.scatter(*gc[0], color="k", s=20)
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    ax.set_zlabel("z (mm)")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_drift_figure(pred: Trajectory, gt: Trajectory, plane_extent,
                        path) -> Path:
    """Per-frame mean corner distance between prediction and ground truth."""
    pc = propagate_corners(pred, plane_extent)
    gc = propagate_corners(gt, plane_extent)
    drift = np.linalg.norm(pc - gc, axis=2).mean(axis=1)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(drift, color="tab:red")
    ax.set_xlabel("frame")
    ax.set_ylabel("drift (mm)")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_history_figure(history, path) -> Path:
    """Training curves: loss terms and held-out drift error per epoch."""
    epochs = [r.epoch for r in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    for key, color in [("point", "tab:blue"), ("velocity", "tab:orange"),
                       ("corr", "tab:green"), ("mse", "tab:purple"),
                       ("total", "k")]:
        ax1.plot(epochs, [getattr(r, key) for r in history],
                 label=key, color=color, lw=1.2)
    ax1.set_yscale("log")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    val = [r.val_de for r in history]
    if np.all(np.isfinite(val)):
        ax2.plot(epochs, val, color="tab:red")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("validation drift (mm)")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def render_uncertainty_figure(sigma2, tau1: float, tau2: float, path) -> Path:
    """Per-frame predictive variance against the two gate thresholds."""
    sigma2 = np.asarray(sigma2, dtype=float)
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(sigma2, color="tab:blue", lw=1.2)
    ax.axhline(tau1, color="tab:orange", ls="--", label=r"$\tau_1$")
    ax.axhline(tau2, color="tab:red", ls="--", label=r"$\tau_2$")
    ax.set_xlabel("frame")
    ax.set_ylabel("predictive variance")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
