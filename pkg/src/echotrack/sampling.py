"""Spatial sampling for the dual streams.

Farthest-point sampling spreads picks across the whole field of view;
nearest-point sampling concentrates on k-neighborhoods of high-gradient
local maxima (tissue interfaces and boundaries, in real images).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.spatial import cKDTree


@dataclass
class PointSet:
    """2-D pixel coordinates (x, y) with optional per-point weight."""
    points: np.ndarray                 # (N, 2) float
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if len(self.weights) != len(self.points):
                raise ValueError("weights must match point count")
        uniq = {tuple(p) for p in self.points}
        if len(uniq) != len(self.points):
            raise ValueError("duplicate points in PointSet")

    def __len__(self):
        return len(self.points)


def fps(points, n: int, start: int = 0) -> np.ndarray:
    """Greedy max-min farthest-point selection; returns ordered indices.

    Each new pick maximizes the minimum Euclidean distance to the picks so
    far; exact distance ties go to the lowest point index.
    """
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=float)
    total = len(pts)
    if not 1 <= n <= total:
        raise ValueError(f"need 1 <= n <= {total}, got {n}")
    if not 0 <= start < total:
        raise ValueError(f"start index {start} out of range")
    chosen = [start]
    # squared distances preserve the argmax and keep exact ties exact
    mind = ((pts - pts[start]) ** 2).sum(axis=1)
    while len(chosen) < n:
        mind[chosen] = -1.0
        nxt = int(np.argmax(mind))   # argmax takes the first (lowest) index on ties
        chosen.append(nxt)
        mind = np.minimum(mind, ((pts - pts[nxt]) ** 2).sum(axis=1))
    return np.array(chosen)


def gradient_magnitude(image: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(np.asarray(image, dtype=np.float64))
    return np.hypot(gx, gy)


def nps(frame, tau_grad: float | None = None, k: int = 8) -> PointSet:
    """k nearest high-gradient pixels around each gradient local maximum.

    tau_grad defaults to the 90th percentile of the frame's gradient
    magnitudes.  Local maxima use 3x3 non-max suppression inside the
    high-gradient region; the result is always a subset of that region.
    """
    img = frame.intensities if hasattr(frame, "intensities") else np.asarray(frame)
    if k < 1:
        raise ValueError("k must be >= 1")
    mag = gradient_magnitude(img)
    if tau_grad is None:
        tau_grad = float(np.percentile(mag, 90.0))
        if tau_grad <= 0:
            # mostly-flat image: the percentile collapses to zero
            if mag.max() <= 0:
                return PointSet(np.empty((0, 2)))
            tau_grad = 0.5 * float(mag.max())
    if tau_grad <= 0:
        raise ValueError("tau_grad must be positive")
    high = mag > tau_grad
    if not high.any():
        return PointSet(np.empty((0, 2)))
    maxima = high & (mag == maximum_filter(mag, size=3))
    ys, xs = np.nonzero(high)
    high_pts = np.stack([xs, ys], axis=1).astype(float)
    mys, mxs = np.nonzero(maxima)
    if len(mys) == 0:
        return PointSet(np.empty((0, 2)))
    tree = cKDTree(high_pts)
    kk = min(k, len(high_pts))
    _, idx = tree.query(np.stack([mxs, mys], axis=1).astype(float), k=kk)
    idx = np.atleast_2d(idx)
    selected = sorted({int(i) for i in idx.ravel()})
    return PointSet(high_pts[selected])
