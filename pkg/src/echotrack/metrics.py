"""Trajectory accuracy metrics.

Eight scalars per sequence, all computed from corner points propagated
through predicted and ground-truth trajectories: mean drift (DE), final
drift (FD) and its rate (FDR), running average drift rate (ADR), max and
summed drift (MD, SD), symmetric Hausdorff distance over the corner clouds
(HD), and mean absolute Euler error of the relative rotation (MEA).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict

import numpy as np
from scipy.spatial.distance import cdist

from .pose import Trajectory, pose_to_matrix, propagate_corners, matrix_to_pose

METRIC_ORDER = ("de", "fd", "fdr", "adr", "md", "sd", "hd", "mea")
METRIC_TITLES = {"de": "DE (mm)", "fd": "FD (mm)", "fdr": "FDR (%)",
                 "adr": "ADR (%)", "md": "MD (mm)", "sd": "SD (mm)",
                 "hd": "HD (mm)", "mea": "MEA (deg)"}


@dataclass
class MetricsReport:
    de: float
    fd: float
    fdr: float
    adr: float
    md: float
    sd: float
    hd: float
    mea: float
    sequence_id: str = ""
    frame_count: int = 0
    gimbal_flagged: bool = False

    def values(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_ORDER}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def symmetric_hausdorff(a: np.ndarray, b: np.ndarray) -> float:
    """max over both directions of the min point-to-set distance."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    d = cdist(a, b)
    return float(max(d.min(axis=1).max(), d.min(axis=0).max()))


def _euler_error_deg(pred_mat: np.ndarray, gt_mat: np.ndarray) -> np.ndarray:
    """|Euler components| of the residual rotation gt^-1 * pred, degrees.

    Using the residual keeps the metric invariant under a common rigid
    transform applied to both trajectories.
    """
    r_err = gt_mat[:3, :3].T @ pred_mat[:3, :3]
    m = np.eye(4)
    m[:3, :3] = r_err
    p = matrix_to_pose(m)
    return np.abs([p.rx, p.ry, p.rz])


def compute_metrics(pred: Trajectory, gt: Trajectory, plane_extent,
                    sequence_id: str = "") -> MetricsReport:
    if len(pred) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(pred)} vs {len(gt)}")
    if len(pred) < 2:
        raise ValueError("metrics need at least 2 frames")
    m_total = len(pred)

    pc = propagate_corners(pred, plane_extent)   # (M, 4, 3)
    gc = propagate_corners(gt, plane_extent)
    drift = np.linalg.norm(pc - gc, axis=2).mean(axis=1)   # per-frame mm

    # ground-truth path length, cumulative per frame
    gt_steps = np.array([np.linalg.norm(r.to_vector()[:3]) for r in gt.relatives()])
    cum = np.concatenate([[0.0], np.cumsum(gt_steps)])
    path = float(cum[-1])
    if path <= 0:
        raise ValueError("zero ground-truth path length: FDR/ADR undefined")

    de = float(drift.mean())
    fd = float(drift[-1])
    md = float(drift.max())
    sd = float(drift.sum())
    fdr = 100.0 * fd / path
    # running-normalized drift rate over frames with nonzero traveled distance
    valid = cum > 0
    adr = float(100.0 * np.mean(drift[valid] / cum[valid])) if valid.any() else 0.0
    hd = symmetric_hausdorff(pc, gc)

    errs = [_euler_error_deg(pose_to_matrix(p), pose_to_matrix(g))
            for p, g in zip(pred, gt)]
    mea = float(np.mean(errs))
    flagged = any(p.near_gimbal_lock() for p in pred) or \
        any(g.near_gimbal_lock() for g in gt)
    return MetricsReport(de, fd, fdr, adr, md, sd, hd, mea,
                         sequence_id=sequence_id, frame_count=m_total,
                         gimbal_flagged=flagged)


@dataclass
class MetricsSummary:
    mean: dict
    std: dict
    count: int


def aggregate(reports: list[MetricsReport]) -> MetricsSummary:
    """Unweighted mean and population standard deviation per metric."""
    if not reports:
        raise ValueError("cannot aggregate an empty report list")
    mat = np.array([[r.values()[k] for k in METRIC_ORDER] for r in reports])
    return MetricsSummary(
        mean={k: float(v) for k, v in zip(METRIC_ORDER, mat.mean(axis=0))},
        std={k: float(v) for k, v in zip(METRIC_ORDER, mat.std(axis=0))},
        count=len(reports))


def write_csv(path, reports: list[MetricsReport],
              summary: MetricsSummary | None = None) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sequence_id", "frame_count", *METRIC_ORDER])
        for r in reports:
            writer.writerow([r.sequence_id, r.frame_count,
                             *[f"{r.values()[k]:.6f}" for k in METRIC_ORDER]])
        if summary is not None:
            writer.writerow(["mean", summary.count,
                             *[f"{summary.mean[k]:.6f}" for k in METRIC_ORDER]])
            writer.writerow(["std", summary.count,
                             *[f"{summary.std[k]:.6f}" for k in METRIC_ORDER]])


def format_table(reports: list[MetricsReport],
                 summary: MetricsSummary | None = None) -> str:
    """Aligned text table in the canonical metric column order."""
    header = ["sequence".ljust(16)] + [METRIC_TITLES[k].rjust(11) for k in METRIC_ORDER]
    lines = ["".join(header)]
    for r in reports:
        cells = [str(r.sequence_id or "-").ljust(16)]
        cells += [f"{r.values()[k]:11.3f}" for k in METRIC_ORDER]
        lines.append("".join(cells))
    if summary is not None:
        for name, row in (("mean", summary.mean), ("std", summary.std)):
            cells = [name.ljust(16)] + [f"{row[k]:11.3f}" for k in METRIC_ORDER]
            lines.append("".join(cells))
    return "\n".join(lines)
