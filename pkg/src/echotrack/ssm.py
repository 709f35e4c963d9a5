"""Linear state-space sequence blocks.

An inner causal block models short-range dynamics with per-window state
resets; two global blocks re-serialize the same tokens under complementary
orderings (farthest-point for coverage, nearest-neighbor chain for
continuity) and are merged by a learned sigmoid gate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, rng_stream
from .sampling import fps

_RNG_SSM_INIT = 20


@dataclass
class SSMParams:
    """Learnable recurrence h' = A h + B f, y = C h + D f."""
    A: Tensor
    B: Tensor
    C: Tensor
    D: Tensor

    @property
    def dims(self) -> tuple[int, int, int]:
        d_h = self.A.shape[0]
        return d_h, self.B.shape[1], self.C.shape[0]

    def tensors(self) -> dict:
        return {"A": self.A, "B": self.B, "C": self.C, "D": self.D}

    def spectral_radius(self) -> float:
        return float(np.abs(np.linalg.eigvals(self.A.data)).max())

    def project_spectral(self, limit: float = 1.0) -> None:
        """Scale A back inside the unit spectral disc; call after each update."""
        rho = self.spectral_radius()
        if rho > limit:
            self.A.data = self.A.data * (limit / rho)


def init_ssm(seed: int, d_h: int = 16, d_f: int = 32, d_o: int = 32,
             stream: int = _RNG_SSM_INIT) -> SSMParams:
    rng = rng_stream(seed, stream)

    def w(rows, cols, scale):
        return Tensor(rng.normal(0, scale, (rows, cols)), requires_grad=True)

    params = SSMParams(
        A=Tensor(0.5 * np.eye(d_h) + rng.normal(0, 0.05, (d_h, d_h)),
                 requires_grad=True),
        B=w(d_h, d_f, np.sqrt(1.0 / d_f)),
        C=w(d_o, d_h, np.sqrt(1.0 / d_h)),
        D=w(d_o, d_f, np.sqrt(1.0 / d_f)),
    )
    params.project_spectral()
    return params


def ssm_scan(features: Tensor, params: SSMParams, window: int | None = None) -> Tensor:
    """Run the recurrence over rows of `features` (T, d_f) -> (T, d_o).

    With `window` k set, the hidden state resets at the start of every
    length-k block, bounding the causal context; output y_t depends only on
    inputs at or before t either way.
    """
    t_total = features.shape[0]
    d_h = params.A.shape[0]
    ys = []
    h = Tensor(np.zeros(d_h))
    for t in range(t_total):
        if window is not None and window > 0 and t % window == 0:
            h = Tensor(np.zeros(d_h))
        f_t = features[t]
        h = params.A @ h + params.B @ f_t
        y = params.C @ h + params.D @ f_t
        ys.append(y.reshape(1, -1))
    return Tensor.concatenate(ys, axis=0)


def inner_mamba(features: Tensor, params: SSMParams, window: int = 4) -> Tensor:
    """Causal local-window pass over per-frame features."""
    return ssm_scan(features, params, window=window)


# ---------------------------------------------------------------------
# dual global pass

def derive_orderings(embeddings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two token permutations: farthest-point order and nearest-chain order.

    Both start at token 0.  The farthest-point order greedily maximizes
    coverage; the nearest chain greedily walks to the closest unvisited
    token, favoring local continuity.
    """
    emb = np.asarray(embeddings, dtype=float)
    m = len(emb)
    if m == 0:
        raise ValueError("need at least one token")
    pi_f = fps(emb, n=m, start=0)
    pi_n = _nearest_chain(emb)
    return pi_f, pi_n


def _nearest_chain(emb: np.ndarray) -> np.ndarray:
    m = len(emb)
    order = [0]
    remaining = set(range(1, m))
    while remaining:
        cur = emb[order[-1]]
        cand = sorted(remaining)
        d2 = ((emb[cand] - cur) ** 2).sum(axis=1)
        order.append(cand[int(np.argmin(d2))])   # first min -> lowest index on ties
        remaining.discard(order[-1])
    return np.array(order)


def _inverse_permutation(pi: np.ndarray) -> np.ndarray:
    inv = np.empty_like(pi)
    inv[pi] = np.arange(len(pi))
    return inv


def dual_mamba(y_in: Tensor, pi_f: np.ndarray, pi_n: np.ndarray,
               params_f: SSMParams, params_n: SSMParams,
               w_gate: Tensor, b_gate: Tensor | None = None) -> Tensor:
    """Gated fusion of the two globally ordered passes, in original order.

    Outputs of each stream are un-permuted back to temporal order before the
    elementwise gate, so the convex combination is index-aligned.
    """
    m = y_in.shape[0]
    if sorted(pi_f) != list(range(m)) or sorted(pi_n) != list(range(m)):
        raise ValueError("orderings must be permutations of the token indices")
    o_f = ssm_scan(y_in[np.asarray(pi_f)], params_f)[_inverse_permutation(np.asarray(pi_f))]
    o_n = ssm_scan(y_in[np.asarray(pi_n)], params_n)[_inverse_permutation(np.asarray(pi_n))]
    pre = Tensor.concatenate([o_f, o_n], axis=1) @ w_gate
    if b_gate is not None:
        pre = pre + b_gate
    g = pre.sigmoid()
    return g * o_f + (1.0 - g) * o_n
