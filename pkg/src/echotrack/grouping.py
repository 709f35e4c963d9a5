"""Contrastive frame embedding and motion-coherent grouping.

A small strided-conv encoder is trained with a margin triplet loss so that
temporally adjacent frames (similar motion) embed close together.  Density
clustering over the embeddings then yields frame groups, relabeled by the
sign of the axial velocity of their members.  Groups are soft priors for
the pose model; no frame is ever dropped because of its group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import AdamW, LrSchedule, Tensor, patchify, rng_stream

EMBED_DIM = 32
DEFAULT_DELTA = 2      # positive window |a - p| <= delta
DEFAULT_GAP = 10       # negative gap    |a - n| >= gap
DEFAULT_MARGIN = 0.2

GROUP_LABELS = ("forward", "backward", "transition", "noise")

_RNG_ENCODER_INIT = 10
_RNG_TRIPLETS = 11


# ---------------------------------------------------------------------
# encoder: 3 strided conv layers (as patch projections) + linear head

def init_encoder(seed: int, embed_dim: int = EMBED_DIM) -> dict:
    rng = rng_stream(seed, _RNG_ENCODER_INIT)

    def w(*shape):
        fan_in = shape[0]
        return Tensor(rng.normal(0, np.sqrt(2.0 / fan_in), shape), requires_grad=True)

    return {
        "conv1": w(16, 16),            # 4x4 patches of 1 channel -> 16
        "conv2": w(64, 32),            # 2x2 patches of 16 channels -> 32
        "conv3": w(128, 32),           # 2x2 patches of 32 channels -> 32
        "proj": w(32, embed_dim),
        "proj_b": Tensor(np.zeros(embed_dim), requires_grad=True),
    }


def _conv_block(x: Tensor, weight: Tensor, p: int, out_ch: int) -> Tensor:
    """Strided conv with kernel == stride == p, via patchify + matmul."""
    _, h, w = x.shape
    tokens = (patchify(x, p) @ weight).relu()            # (h/p * w/p, out_ch)
    return tokens.reshape(h // p, w // p, out_ch).transpose(2, 0, 1)


def encode_frame(params: dict, image) -> Tensor:
    """Map one grayscale frame to a unit-norm embedding vector."""
    img = image.intensities if hasattr(image, "intensities") else np.asarray(image)
    x = Tensor(np.asarray(img, dtype=np.float64)[None])  # (1, H, W)
    x = _conv_block(x, params["conv1"], 4, 16)
    x = _conv_block(x, params["conv2"], 2, 32)
    x = _conv_block(x, params["conv3"], 2, 32)
    pooled = x.reshape(32, -1).mean(axis=1)
    e = pooled @ params["proj"] + params["proj_b"]
    return e / (e.l2norm() + 1e-12)


def triplet_loss(e_a: Tensor, e_p: Tensor, e_n: Tensor,
                 alpha: float = DEFAULT_MARGIN) -> Tensor:
    """max(||e_a - e_p||^2 - ||e_a - e_n||^2 + alpha, 0)."""
    d_ap = (e_a - e_p).squared_norm()
    d_an = (e_a - e_n).squared_norm()
    return (d_ap - d_an + alpha).relu()


def train_embedding(frames, delta: int = DEFAULT_DELTA, gap: int = DEFAULT_GAP,
                    alpha: float = DEFAULT_MARGIN, iterations: int = 120,
                    batch: int = 6, lr: float = 3e-3, seed: int = 0) -> dict:
    """Fit the encoder with temporally sampled triplets; returns parameters."""
    t_total = len(frames)
    if t_total <= gap:
        raise ValueError(f"sequence length {t_total} leaves no valid triplets "
                         f"(needs > {gap})")
    params = init_encoder(seed)
    opt = AdamW(params, schedule=LrSchedule(base_lr=lr), weight_decay=1e-4,
                clip_norm=5.0)
    rng = rng_stream(seed, _RNG_TRIPLETS)
    for _ in range(iterations):
        losses = []
        for _ in range(batch):
            a = int(rng.integers(t_total))
            p_lo, p_hi = max(0, a - delta), min(t_total - 1, a + delta)
            p = int(rng.integers(p_lo, p_hi + 1))
            far = [i for i in range(t_total) if abs(i - a) >= gap]
            n = int(far[rng.integers(len(far))])
            losses.append(triplet_loss(encode_frame(params, frames[a]),
                                       encode_frame(params, frames[p]),
                                       encode_frame(params, frames[n]), alpha))
        total = sum(losses[1:], losses[0]) * (1.0 / batch)
        opt.zero_grad()
        total.backward()
        opt.step()
    return params


def embed_frames(params: dict, frames) -> np.ndarray:
    return np.stack([encode_frame(params, f).data for f in frames])


# ---------------------------------------------------------------------
# density clustering (DBSCAN) over embeddings

def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels >= 0, or -1 for noise.  Euclidean metric."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    labels = np.full(n, -2)   # -2 unvisited, -1 noise
    d2 = ((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
    neighbors = [np.nonzero(d2[i] <= eps * eps)[0] for i in range(n)]
    cluster = -1
    for i in range(n):
        if labels[i] != -2:
            continue
        if len(neighbors[i]) < min_pts:
            labels[i] = -1
            continue
        cluster += 1
        labels[i] = cluster
        frontier = list(neighbors[i])
        j = 0
        while j < len(frontier):
            q = frontier[j]
            j += 1
            if labels[q] == -1:
                labels[q] = cluster
            if labels[q] != -2:
                continue
            labels[q] = cluster
            if len(neighbors[q]) >= min_pts:
                frontier.extend(neighbors[q])
    return labels


@dataclass
class FrameGroup:
    group_id: int
    members: list
    label: str

    def __post_init__(self):
        if self.label not in GROUP_LABELS:
            raise ValueError(f"unknown group label {self.label!r}")


def default_eps(embeddings: np.ndarray) -> float:
    """10th percentile of nonzero pairwise distances."""
    d = np.sqrt(((embeddings[:, None] - embeddings[None]) ** 2).sum(axis=2))
    vals = d[np.triu_indices(len(embeddings), k=1)]
    vals = vals[vals > 0]
    if len(vals) == 0:
        return 1e-6
    return float(np.percentile(vals, 10.0))


def group_frames(embeddings: np.ndarray, eps: float | None = None,
                 min_pts: int = 3, velocities=None) -> list[FrameGroup]:
    """Cluster embeddings, then label each cluster by axial-velocity sign.

    `velocities` is a signed per-frame axial speed (ground truth during
    training, estimated at inference).  Without it every cluster is labeled
    transition.
    """
    emb = np.asarray(embeddings, dtype=float)
    if eps is None:
        eps = default_eps(emb)
    labels = dbscan(emb, eps, min_pts)
    groups: list[FrameGroup] = []
    vel = None if velocities is None else np.asarray(velocities, dtype=float)
    scale = None if vel is None else float(np.mean(np.abs(vel))) or 1.0
    for cid in sorted(set(labels)):
        members = [int(i) for i in np.nonzero(labels == cid)[0]]
        if cid == -1:
            groups.append(FrameGroup(-1, members, "noise"))
            continue
        if vel is None:
            name = "transition"
        else:
            mv = float(np.mean(vel[members]))
            if mv > 0.3 * scale:
                name = "forward"
            elif mv < -0.3 * scale:
                name = "backward"
            else:
                name = "transition"
        groups.append(FrameGroup(cid, members, name))
    return groups


def groups_to_json(groups: list[FrameGroup], num_frames: int) -> list[dict]:
    """Per-frame (group id, label) records for UI export."""
    by_frame = {}
    for g in groups:
        for m in g.members:
            by_frame[m] = {"frame": m, "group": g.group_id, "label": g.label}
    return [by_frame.get(i, {"frame": i, "group": -1, "label": "noise"})
            for i in range(num_frames)]


def one_hot_labels(groups: list[FrameGroup], num_frames: int) -> np.ndarray:
    """(num_frames, 4) one-hot over forward/backward/transition/noise."""
    out = np.zeros((num_frames, len(GROUP_LABELS)))
    idx = {name: i for i, name in enumerate(GROUP_LABELS)}
    for rec in groups_to_json(groups, num_frames):
        out[rec["frame"], idx[rec["label"]]] = 1.0
    return out
