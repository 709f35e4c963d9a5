"""Dense optical flow between consecutive frames.

Classical and deterministic: ZNCC block matching on 8x8 blocks over a +-7 px
search window, refined with a single Lucas-Kanade least-squares step.
Confidence comes from local gradient energy; flat or border blocks get 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor

BLOCK = 8
SEARCH = 7
_CONF_SCALE = 1e-4   # gradient energy at which confidence reaches 0.5


@dataclass
class FlowField:
    """Per-pixel displacement (u right, v down) in pixels plus confidence."""
    u: np.ndarray
    v: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        if not (self.u.shape == self.v.shape == self.confidence.shape):
            raise ValueError("flow components must share one shape")
        for arr in (self.u, self.v, self.confidence):
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite flow values")


def _as_image(frame) -> np.ndarray:
    img = frame.intensities if hasattr(frame, "intensities") else np.asarray(frame)
    return np.asarray(img, dtype=np.float64)


def estimate_flow(a, b, block: int = BLOCK, search: int = SEARCH) -> FlowField:
    """Displacement field mapping frame a onto frame b."""
    ia, ib = _as_image(a), _as_image(b)
    if ia.shape != ib.shape:
        raise ValueError(f"frame dims differ: {ia.shape} vs {ib.shape}")
    h, w = ia.shape
    u = np.zeros((h, w))
    v = np.zeros((h, w))
    conf = np.zeros((h, w))

    gy, gx = np.gradient(ia)
    by, bgx = np.gradient(ib)[0], np.gradient(ib)[1]
    windows = sliding_window_view(ib, (block, block))

    for r0 in range(0, h - block + 1, block):
        for c0 in range(0, w - block + 1, block):
            sl = (slice(r0, r0 + block), slice(c0, c0 + block))
            if (r0 - search < 0 or c0 - search < 0
                    or r0 + block + search > h or c0 + block + search > w):
                continue  # search window leaves the image: confidence 0
            patch = ia[sl]
            energy = float(np.mean(gx[sl] ** 2 + gy[sl] ** 2))
            c = energy / (energy + _CONF_SCALE)
            pm = patch.mean()
            ps = patch.std()
            if ps < 1e-9:
                continue  # textureless block
            za = (patch - pm) / ps

            cand = windows[r0 - search:r0 + search + 1, c0 - search:c0 + search + 1]
            cm = cand.mean(axis=(2, 3), keepdims=True)
            cs = cand.std(axis=(2, 3), keepdims=True)
            zb = (cand - cm) / np.maximum(cs, 1e-9)
            score = (zb * za).mean(axis=(2, 3))
            idx = np.unravel_index(np.argmax(score), score.shape)
            dy, dx = idx[0] - search, idx[1] - search

            # one Lucas-Kanade refinement step at the displaced location
            tsl = (slice(r0 + dy, r0 + dy + block), slice(c0 + dx, c0 + dx + block))
            ix, iy = bgx[tsl], by[tsl]
            it = ib[tsl] - patch
            a11 = float((ix * ix).sum())
            a12 = float((ix * iy).sum())
            a22 = float((iy * iy).sum())
            det = a11 * a22 - a12 * a12
            ddx = ddy = 0.0
            if det > 1e-12:
                b1 = -float((ix * it).sum())
                b2 = -float((iy * it).sum())
                ddx = np.clip((a22 * b1 - a12 * b2) / det, -1.0, 1.0)
                ddy = np.clip((a11 * b2 - a12 * b1) / det, -1.0, 1.0)

            u[sl] = dx + ddx
            v[sl] = dy + ddy
            conf[sl] = c
    return FlowField(u, v, conf)


def flow_features(field: FlowField, grid: int) -> Tensor:
    """Pool the field into a (grid, grid, 3) tensor of mean (u, v, confidence)."""
    h, w = field.u.shape
    if h % grid or w % grid:
        raise ValueError(f"grid {grid} does not divide frame dims {(h, w)}")
    bh, bw = h // grid, w // grid

    def pool(x):
        return x.reshape(grid, bh, grid, bw).mean(axis=(1, 3))

    feats = np.stack([pool(field.u), pool(field.v), pool(field.confidence)], axis=-1)
    return Tensor(feats)


def median_flow(field: FlowField, min_confidence: float = 0.1) -> tuple[float, float]:
    """Median (u, v) over confident pixels; (0, 0) if none qualify."""
    mask = field.confidence >= min_confidence
    if not mask.any():
        return (0.0, 0.0)
    return (float(np.median(field.u[mask])), float(np.median(field.v[mask])))
