"""Feature fusion and 6-DoF regression.

Per frame: a small strided-conv encoder, patch tokens with 3-D sinusoidal
position codes, sigmoid-blended optical-flow priors, and group-label
channels.  Temporal context comes from the causal inner pass plus the gated
dual global pass; a cross-attention merge and a two-layer head regress one
reference-anchored 6-DoF pose per frame (reference = first window frame).

The loss suite (corner-point MSE, velocity consistency, stream correlation,
pose MSE) lives here too, built on the same autodiff tensors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, dropout, patchify, rng_stream, save_checkpoint, load_checkpoint
from .flow import estimate_flow, flow_features
from .pose import plane_corners
from .ssm import SSMParams, derive_orderings, dual_mamba, init_ssm, inner_mamba

_RNG_MODEL_INIT = 30

DEG2RAD = np.pi / 180.0


# ---------------------------------------------------------------------
# positional encoding + patch embedding

def positional_encoding(t_total: int, g_rows: int, g_cols: int, dim: int) -> np.ndarray:
    """Additive sinusoidal code over (t, i, j); three interleaved bands.

    Channel c encodes axis c % 3 (t, i, j respectively) with a standard
    sin/cos frequency ladder inside each band.  Shape (t_total, g_rows,
    g_cols, dim).
    """
    out = np.zeros((t_total, g_rows, g_cols, dim))
    pos = np.stack(np.meshgrid(np.arange(t_total), np.arange(g_rows),
                               np.arange(g_cols), indexing="ij"), axis=-1)
    for c in range(dim):
        axis = c % 3
        k = c // 3
        freq = 1.0 / (10000.0 ** (2 * (k // 2) / max(dim // 3, 1)))
        phase = pos[..., axis] * freq
        out[..., c] = np.sin(phase) if k % 2 == 0 else np.cos(phase)
    return out


@dataclass
class PatchEmbedding:
    """Token grid e_{t,i,j}: linear patch projection plus position code."""
    tokens: Tensor            # (T, g_rows, g_cols, dim)
    grid: tuple               # (T, g_rows, g_cols)

    def __post_init__(self):
        t, gr, gc = self.grid
        if self.tokens.shape[:3] != (t, gr, gc):
            raise ValueError("token tensor does not match grid dims")


def embed_patches(maps, patch_size: int, weight: Tensor,
                  bias: Tensor | None = None) -> PatchEmbedding:
    """Project non-overlapping patches of per-frame maps and add the 3-D PE.

    `maps` is a sequence of (C, H, W) tensors/arrays (C=1 allowed for raw
    frames); `weight` has shape (C * patch_size**2, dim).
    """
    per_frame = []
    for m in maps:
        t = m if isinstance(m, Tensor) else Tensor(np.asarray(m, dtype=np.float64))
        if t.data.ndim == 2:
            t = t.reshape(1, *t.shape)
        _, h, w = t.shape
        if h % patch_size or w % patch_size:
            raise ValueError(f"patch size {patch_size} does not divide dims {(h, w)}")
        tok = patchify(t, patch_size) @ weight
        if bias is not None:
            tok = tok + bias
        per_frame.append(tok.reshape(1, h // patch_size, w // patch_size, -1))
    tokens = Tensor.concatenate(per_frame, axis=0)
    t_total, gr, gc, dim = tokens.shape
    tokens = tokens + Tensor(positional_encoding(t_total, gr, gc, dim))
    return PatchEmbedding(tokens, (t_total, gr, gc))


# ---------------------------------------------------------------------
# blending + attention

def blend_flow(f_learned: Tensor, f_flow: Tensor, w_blend: Tensor,
               b_blend: Tensor | None = None) -> Tensor:
    """Elementwise convex combination with a learned sigmoid blend weight."""
    if f_learned.shape != f_flow.shape:
        raise ValueError(f"shape mismatch: {f_learned.shape} vs {f_flow.shape}")
    pre = Tensor.concatenate([f_learned, f_flow], axis=-1) @ w_blend
    if b_blend is not None:
        pre = pre + b_blend
    a = pre.sigmoid()
    return a * f_learned + (1.0 - a) * f_flow


def cross_attention(f_global: Tensor, f_local: Tensor, wq: Tensor, wk: Tensor,
                    wv: Tensor, wo: Tensor) -> Tensor:
    """Single-head scaled dot-product attention; queries from the global
    stream, keys/values from the local stream, residual add of the queries."""
    if f_global.shape[0] == 0 or f_local.shape[0] == 0:
        raise ValueError("attention needs a nonempty token set")
    q = f_global @ wq
    k = f_local @ wk
    v = f_local @ wv
    scale = 1.0 / np.sqrt(q.shape[-1])
    attn = ((q @ k.transpose()) * scale).softmax(axis=-1)
    return f_global + (attn @ v) @ wo


# ---------------------------------------------------------------------
# differentiable pose -> corner mapping (for the point loss)

def _scalarize(values) -> Tensor:
    return Tensor.concatenate([v.reshape(1) for v in values], axis=0)


def rotation_from_pose_row(pose_row: Tensor) -> Tensor:
    """3x3 intrinsic Z-Y-X rotation built from a 6-vector pose tensor row."""
    ax = pose_row[3] * DEG2RAD
    ay = pose_row[4] * DEG2RAD
    az = pose_row[5] * DEG2RAD
    sx, cx = ax.sin(), ax.cos()
    sy, cy = ay.sin(), ay.cos()
    sz, cz = az.sin(), az.cos()
    rows = [
        cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx,
        sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx,
        -sy, cy * sx, cy * cx,
    ]
    return _scalarize(rows).reshape(3, 3)


def poses_to_corners(poses: Tensor, plane_extent) -> Tensor:
    """Map each 6-vector pose row to its 4 transformed plane corners, (M, 4, 3)."""
    corners = Tensor(plane_corners(plane_extent))
    out = []
    for m in range(poses.shape[0]):
        r = rotation_from_pose_row(poses[m])
        p = corners @ r.transpose() + poses[m][:3]
        out.append(p.reshape(1, 4, 3))
    return Tensor.concatenate(out, axis=0)


# ---------------------------------------------------------------------
# losses

def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def loss_point(pred_corners, gt_corners) -> Tensor:
    """(1 / MN) sum of squared corner-point distances, mm^2."""
    p, g = _as_tensor(pred_corners), _as_tensor(gt_corners)
    if p.shape != g.shape:
        raise ValueError(f"corner sets differ in shape: {p.shape} vs {g.shape}")
    m, n = p.shape[0], p.shape[1]
    return (p - g).squared_norm() * (1.0 / (m * n))


def loss_velocity(pred_rel, gt_rel) -> Tensor:
    """Mean norm of the frame-to-frame velocity mismatch.

    Inputs are (M-1, 6) relative-pose stacks; the velocity at step m is the
    6-vector difference of consecutive relatives, so a constant offset on
    every relative cancels out.
    """
    p, g = _as_tensor(pred_rel), _as_tensor(gt_rel)
    if p.shape != g.shape:
        raise ValueError("relative-pose stacks differ in shape")
    r = p.shape[0]
    if r < 1:
        raise ValueError("need at least one relative pose (M >= 2)")
    if r == 1:
        return Tensor(0.0)
    dv = (p[1:] - p[:-1]) - (g[1:] - g[:-1])
    per_step = (dv * dv).sum(axis=1).sqrt()
    return per_step.sum() * (1.0 / r)


def loss_corr(f_a, f_b) -> Tensor:
    """1 - mean Pearson correlation between matching feature channels."""
    a, b = _as_tensor(f_a), _as_tensor(f_b)
    if a.shape != b.shape:
        raise ValueError("feature stacks differ in shape")
    dim = a.shape[-1]
    a = a.reshape(-1, dim)
    b = b.reshape(-1, dim)
    corrs = []
    for c in range(dim):
        ac, bc = a[:, c], b[:, c]
        if float(ac.data.std()) < 1e-12 or float(bc.data.std()) < 1e-12:
            warnings.warn(f"zero-variance channel {c} excluded from correlation loss")
            continue
        az = ac - ac.mean()
        bz = bc - bc.mean()
        corrs.append((az * bz).sum() / (az.l2norm() * bz.l2norm() + 1e-12))
    if not corrs:
        raise ValueError("all channels have zero variance")
    stacked = _scalarize(corrs)
    return 1.0 - stacked.mean()


def loss_pose_mse(pred, gt) -> Tensor:
    """Plain MSE over the 6 pose components."""
    p, g = _as_tensor(pred), _as_tensor(gt)
    if p.shape != g.shape:
        raise ValueError("pose stacks differ in shape")
    return (p - g).squared_norm() * (1.0 / p.size)


@dataclass
class LossWeights:
    point: float = 1.0
    velocity: float = 0.1
    corr: float = 0.01
    mse: float = 0.1

    def __post_init__(self):
        vals = (self.point, self.velocity, self.corr, self.mse)
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")


# ---------------------------------------------------------------------
# the full pose network

@dataclass
class ModelConfig:
    frame_size: tuple = (64, 64)
    d_f: int = 32          # per-frame feature width
    d_h: int = 16          # SSM state size
    d_o: int = 32          # SSM output width
    patch: int = 2         # patch size over the conv feature grid
    window: int = 4        # inner causal window
    flow_grid: int = 8
    group_channels: int = 4

    def to_dict(self):
        return {"frame_size": list(self.frame_size), "d_f": self.d_f,
                "d_h": self.d_h, "d_o": self.d_o, "patch": self.patch,
                "window": self.window, "flow_grid": self.flow_grid,
                "group_channels": self.group_channels}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["frame_size"] = tuple(d["frame_size"])
        return cls(**d)


class PoseModel:
    """End-to-end network mapping a frame window to per-frame poses."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0,
                 params: dict | None = None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else self._init_params(seed)
        c = self.config
        self.ssm_inner = self._ssm_view("ssm_in")
        self.ssm_f = self._ssm_view("ssm_f")
        self.ssm_n = self._ssm_view("ssm_n")

    # -- parameters ----------------------------------------------------

    def _init_params(self, seed: int) -> dict:
        c = self.config
        rng = rng_stream(seed, _RNG_MODEL_INIT)

        def w(rows, cols):
            return Tensor(rng.normal(0, np.sqrt(2.0 / rows), (rows, cols)),
                          requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        p = {
            # 4-layer strided conv encoder: 1->8->16->32->d_f, /2 each of 3
            "enc1": w(4, 8), "enc2": w(32, 16), "enc3": w(64, 32),
            "enc4": w(32, c.d_f),
            # patch embedding over the (d_f, 8, 8) grid
            "embed_w": w(c.d_f * c.patch ** 2, c.d_f), "embed_b": zeros(c.d_f),
            # flow-feature projection (flow_grid^2 * 3 -> d_f)
            "flow_w": w(c.flow_grid ** 2 * 3, c.d_f), "flow_b": zeros(c.d_f),
            # blend gate and group mixing
            "blend_w": w(2 * c.d_f, c.d_f), "blend_b": zeros(c.d_f),
            "mix_w": w(c.d_f + c.group_channels, c.d_f), "mix_b": zeros(c.d_f),
            # dual gate, attention, head
            "gate_w": w(2 * c.d_o, c.d_o), "gate_b": zeros(c.d_o),
            "attn_q": w(c.d_o, c.d_o), "attn_k": w(c.d_o, c.d_o),
            "attn_v": w(c.d_o, c.d_o), "attn_o": w(c.d_o, c.d_o),
            "head1": w(c.d_o, 32), "head1_b": zeros(32),
            "head2": Tensor(rng.normal(0, 0.01, (32, 6)), requires_grad=True),
            "head2_b": zeros(6),
        }
        for name, stream in (("ssm_in", 31), ("ssm_f", 32), ("ssm_n", 33)):
            ssm = init_ssm(seed, c.d_h, c.d_f if name == "ssm_in" else c.d_o,
                           c.d_o, stream=stream)
            for k, t in ssm.tensors().items():
                p[f"{name}.{k}"] = t
        return p

    def _ssm_view(self, name: str) -> SSMParams:
        return SSMParams(A=self.params[f"{name}.A"], B=self.params[f"{name}.B"],
                         C=self.params[f"{name}.C"], D=self.params[f"{name}.D"])

    def parameters(self) -> dict:
        return self.params

    def project_spectral(self) -> None:
        for ssm in (self.ssm_inner, self.ssm_f, self.ssm_n):
            ssm.project_spectral(1.0)

    def save(self, path) -> None:
        save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path, config: ModelConfig | None = None) -> "PoseModel":
        raw = load_checkpoint(path)
        params = {k: Tensor(v, requires_grad=True) for k, v in raw.items()}
        return cls(config=config, params=params)

    # -- forward pieces ------------------------------------------------

    def _encode(self, image: np.ndarray) -> Tensor:
        """(H, W) frame -> (d_f, H/8, W/8) feature grid."""
        from .grouping import _conv_block  # same strided-conv building block
        if isinstance(image, Tensor):
            x = image.reshape(1, *image.shape)
        else:
            x = Tensor(np.asarray(image, dtype=np.float64)[None])
        x = _conv_block(x, self.params["enc1"], 2, 8)
        x = _conv_block(x, self.params["enc2"], 2, 16)
        x = _conv_block(x, self.params["enc3"], 2, 32)
        ch, gh, gw = x.shape
        tok = (x.reshape(ch, gh * gw).transpose() @ self.params["enc4"]).relu()
        return tok.reshape(gh, gw, -1).transpose(2, 0, 1)

    def raw_flow_features(self, images: list) -> np.ndarray:
        """(T, flow_grid^2 * 3) pooled flow stats; frame 0 gets zero motion.

        Parameter-free, so callers may precompute this once per sequence.
        """
        c = self.config
        rows = [np.zeros(c.flow_grid ** 2 * 3)]
        for t in range(1, len(images)):
            field = estimate_flow(images[t - 1], images[t])
            rows.append(flow_features(field, c.flow_grid).data.ravel())
        return np.stack(rows)

    def _flow_features(self, images: list,
                       raw: np.ndarray | None = None) -> Tensor:
        if raw is None:
            raw = self.raw_flow_features(images)
        return Tensor(np.asarray(raw, dtype=np.float64)) @ self.params["flow_w"] \
            + self.params["flow_b"]

    def forward(self, frames, group_onehot: np.ndarray | None = None,
                dropout_rate: float = 0.0,
                rng: np.random.Generator | None = None,
                embeddings: np.ndarray | None = None,
                flow_raw: np.ndarray | None = None) -> Tensor:
        """Window of frames -> (T, 6) reference-anchored poses (ref = frame 0).

        `dropout_rate` > 0 enables stochastic passes (training regularizer
        and MC-dropout at inference); `rng` must then be supplied.
        """
        c = self.config
        images = []
        for f in frames:
            if isinstance(f, Tensor):
                images.append(f)
            elif hasattr(f, "intensities"):
                images.append(f.intensities)
            else:
                images.append(np.asarray(f))
        t_total = len(images)
        if t_total < 1:
            raise ValueError("need at least one frame")
        if any(tuple(img.shape) != tuple(c.frame_size) for img in images):
            raise ValueError("frame dims do not match model config")
        if dropout_rate > 0 and rng is None:
            raise ValueError("dropout requires an rng")

        grids = [self._encode(img) for img in images]
        emb = embed_patches(grids, c.patch, self.params["embed_w"],
                            self.params["embed_b"])
        tt, gr, gc = emb.grid
        f_learned = emb.tokens.reshape(tt, gr * gc, c.d_f).mean(axis=1)

        plain = [img.data if isinstance(img, Tensor) else img for img in images]
        f_flow = self._flow_features(plain, raw=flow_raw)
        fused = blend_flow(f_learned, f_flow, self.params["blend_w"],
                           self.params["blend_b"])
        if dropout_rate > 0:
            fused = dropout(fused, dropout_rate, rng)

        if group_onehot is None:
            group_onehot = np.zeros((t_total, c.group_channels))
        feats = Tensor.concatenate([fused, Tensor(np.asarray(group_onehot, dtype=float))],
                                   axis=1)
        feats = (feats @ self.params["mix_w"] + self.params["mix_b"]).relu()

        y_in = inner_mamba(feats, self.ssm_inner, window=c.window)
        order_src = embeddings if embeddings is not None else feats.data
        pi_f, pi_n = derive_orderings(order_src)
        f_global = dual_mamba(y_in, pi_f, pi_n, self.ssm_f, self.ssm_n,
                              self.params["gate_w"], self.params["gate_b"])
        f_fused = cross_attention(f_global, y_in, self.params["attn_q"],
                                  self.params["attn_k"], self.params["attn_v"],
                                  self.params["attn_o"])
        self._last_streams = (f_global, y_in)   # for the correlation loss
        self._last_patch_tokens = emb.tokens     # for the uncertainty heatmap
        if dropout_rate > 0:
            f_fused = dropout(f_fused, dropout_rate, rng)
        hidden = (f_fused @ self.params["head1"] + self.params["head1_b"]).relu()
        return hidden @ self.params["head2"] + self.params["head2_b"]

    def stream_features(self) -> tuple[Tensor, Tensor]:
        """Global and local stream outputs of the most recent forward call."""
        if not hasattr(self, "_last_streams"):
            raise RuntimeError("call forward() first")
        return self._last_streams


def window_loss(model: PoseModel, frames, gt_window_poses: np.ndarray,
                plane_extent, weights: LossWeights,
                group_onehot=None, dropout_rate: float = 0.0,
                rng=None, flow_raw: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Total curriculum loss for one window; returns (loss, per-term floats).

    `gt_window_poses` are ground-truth poses re-anchored so the window's
    first frame is the identity, shape (T, 6).
    """
    pred = model.forward(frames, group_onehot=group_onehot,
                         dropout_rate=dropout_rate, rng=rng, flow_raw=flow_raw)
    gt = np.asarray(gt_window_poses, dtype=float)
    l_pt = loss_point(poses_to_corners(pred, plane_extent),
                      poses_to_corners(Tensor(gt), plane_extent).data)
    l_vel = loss_velocity(pred[1:] - pred[:-1], gt[1:] - gt[:-1])
    f_global, f_local = model.stream_features()
    l_corr = loss_corr(f_global, f_local)
    l_mse = loss_pose_mse(pred, gt)
    total = (weights.point * l_pt + weights.velocity * l_vel
             + weights.corr * l_corr + weights.mse * l_mse)
    terms = {"point": float(l_pt.data), "velocity": float(l_vel.data),
             "corr": float(l_corr.data), "mse": float(l_mse.data),
             "total": float(total.data)}
    return total, terms
