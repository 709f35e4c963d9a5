"""Minimal dense-tensor reverse-mode automatic differentiation.

Numpy-backed, float64 everywhere.  The op set is deliberately small: it is
exactly what the pose-regression stack needs (elementwise arithmetic, matmul,
sigmoid/relu/softmax, reductions, concatenate/slice/reshape, dropout).  No
general broadcasting beyond what numpy gives us for matching / leading batch
dimensions; gradients are un-broadcast back to the leaf shape.

Also hosts the AdamW optimizer (decoupled weight decay, global-norm gradient
clipping, lr scheduling), the splittable counter-based RNG used by every
stochastic component, and the binary parameter-checkpoint container.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class NonFiniteError(FloatingPointError):
    """A tensor value or gradient became NaN/Inf."""


def rng_stream(seed: int, stream: int) -> np.random.Generator:
    """Counter-based generator keyed by (global seed, stream id).

    Distinct (seed, stream) pairs give statistically independent streams and
    results do not depend on the order in which streams are drawn from.
    """
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1),
                                                     int(stream) & (2**64 - 1)]))


def _ensure_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array that records the graph needed for backward()."""

    def __init__(self, data, requires_grad: bool = False, _children: tuple = (),
                 _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        _ensure_finite(self.data, f"tensor ({_op or 'leaf'})")
        self.requires_grad = requires_grad or any(c.requires_grad for c in _children)
        self.grad: np.ndarray | None = None
        self._children = _children
        self._backward = lambda: None
        self._op = _op

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def _accum(self, grad: np.ndarray) -> None:
        grad = _unbroadcast(np.asarray(grad, dtype=np.float64), self.data.shape)
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad.reshape(self.data.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, grad={self.grad is not None})"

    # -- arithmetic ----------------------------------------------------

    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = Tensor._wrap(other)
        out = Tensor(self.data + other.data, _children=(self, other), _op="add")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad)
            if other.requires_grad:
                other._accum(out.grad)
        out._backward = _backward
        return out

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data, _children=(self,), _op="neg")

        def _backward():
            if self.requires_grad:
                self._accum(-out.grad)
        out._backward = _backward
        return out

    def __sub__(self, other):
        return self + (-Tensor._wrap(other))

    def __rsub__(self, other):
        return Tensor._wrap(other) + (-self)

    def __mul__(self, other):
        other = Tensor._wrap(other)
        out = Tensor(self.data * other.data, _children=(self, other), _op="mul")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad * other.data)
            if other.requires_grad:
                other._accum(out.grad * self.data)
        out._backward = _backward
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._wrap(other)
        out = Tensor(self.data / other.data, _children=(self, other), _op="div")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad / other.data)
            if other.requires_grad:
                other._accum(-out.grad * self.data / other.data ** 2)
        out._backward = _backward
        return out

    def __pow__(self, p: float):
        out = Tensor(self.data ** p, _children=(self,), _op=f"pow{p}")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad * p * self.data ** (p - 1))
        out._backward = _backward
        return out

    def __matmul__(self, other):
        other = Tensor._wrap(other)
        out = Tensor(self.data @ other.data, _children=(self, other), _op="matmul")

        a, b = self.data, other.data

        def _backward():
            g = out.grad
            if a.ndim == 1 and b.ndim == 1:        # inner product
                ga, gb = g * b, g * a
            elif a.ndim == 1:                      # row vector @ matrix
                ga, gb = b @ g, np.outer(a, g)
            elif b.ndim == 1:                      # matrix @ column vector
                ga, gb = np.outer(g, b), np.swapaxes(a, -1, -2) @ g
            else:
                ga = g @ np.swapaxes(b, -1, -2)
                gb = np.swapaxes(a, -1, -2) @ g
            if self.requires_grad:
                self._accum(ga)
            if other.requires_grad:
                other._accum(gb)
        out._backward = _backward
        return out

    # -- nonlinearities ------------------------------------------------

    def relu(self):
        out = Tensor(np.maximum(self.data, 0.0), _children=(self,), _op="relu")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad * (self.data > 0))
        out._backward = _backward
        return out

    def sigmoid(self):
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor(s, _children=(self,), _op="sigmoid")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad * s * (1.0 - s))
        out._backward = _backward
        return out

    def softmax(self, axis: int = -1):
        z = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)
        out = Tensor(s, _children=(self,), _op="softmax")

        def _backward():
            if self.requires_grad:
                g = out.grad
                self._accum(s * (g - (g * s).sum(axis=axis, keepdims=True)))
        out._backward = _backward
        return out

    def sin(self):
        out = Tensor(np.sin(self.data), _children=(self,), _op="sin")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad * np.cos(self.data))
        out._backward = _backward
        return out

    def cos(self):
        out = Tensor(np.cos(self.data), _children=(self,), _op="cos")

        def _backward():
            if self.requires_grad:
                self._accum(-out.grad * np.sin(self.data))
        out._backward = _backward
        return out

    def sqrt(self, eps: float = 1e-12):
        r = np.sqrt(self.data)
        out = Tensor(r, _children=(self,), _op="sqrt")

        def _backward():
            if self.requires_grad:
                # subgradient 0-safe: clamp the denominator
                self._accum(out.grad * 0.5 / np.maximum(r, eps))
        out._backward = _backward
        return out

    # -- reductions ----------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims),
                     _children=(self,), _op="sum")

        def _backward():
            if self.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape))
        out._backward = _backward
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else self.data.shape[axis]
        out = Tensor(self.data.mean(axis=axis, keepdims=keepdims),
                     _children=(self,), _op="mean")

        def _backward():
            if self.requires_grad:
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accum(np.broadcast_to(g, self.data.shape) / n)
        out._backward = _backward
        return out

    def squared_norm(self):
        """Scalar sum of squares over all entries."""
        out = Tensor((self.data ** 2).sum(), _children=(self,), _op="sqnorm")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad * 2.0 * self.data)
        out._backward = _backward
        return out

    def l2norm(self, eps: float = 1e-12):
        """Scalar Euclidean norm with a 0-safe backward."""
        n = float(np.sqrt((self.data ** 2).sum()))
        out = Tensor(n, _children=(self,), _op="l2norm")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad * self.data / max(n, eps))
        out._backward = _backward
        return out

    # -- shape ops -----------------------------------------------------

    def reshape(self, *shape):
        out = Tensor(self.data.reshape(*shape), _children=(self,), _op="reshape")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad.reshape(self.data.shape))
        out._backward = _backward
        return out

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)
        out = Tensor(self.data.transpose(axes), _children=(self,), _op="transpose")

        def _backward():
            if self.requires_grad:
                self._accum(out.grad.transpose(inv))
        out._backward = _backward
        return out

    def __getitem__(self, idx):
        out = Tensor(self.data[idx], _children=(self,), _op="slice")

        def _backward():
            if self.requires_grad:
                g = np.zeros_like(self.data)
                np.add.at(g, idx, out.grad)
                self._accum(g)
        out._backward = _backward
        return out

    @staticmethod
    def concatenate(tensors, axis: int = 0):
        tensors = [Tensor._wrap(t) for t in tensors]
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                     _children=tuple(tensors), _op="concat")
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def _backward():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * out.grad.ndim
                    sl[axis] = slice(lo, hi)
                    t._accum(out.grad[tuple(sl)])
        out._backward = _backward
        return out

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar root; accumulates into leaf .grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for c in node._children:
                if id(c) not in visited:
                    stack.append((c, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is not None and node.requires_grad:
                node._backward()
        for node in topo:
            if node.grad is not None:
                _ensure_finite(node.grad, f"gradient of {node._op or 'leaf'}")


# ---------------------------------------------------------------------
# dropout

def dropout_mask(shape, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 or 1/(1-rate); E[mask] = 1."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=np.float64)
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def dropout(t: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    return t * Tensor(dropout_mask(t.shape, rate, rng))


def patchify(t: Tensor, p: int) -> Tensor:
    """(C, H, W) -> (H/p * W/p, C*p*p) token matrix of non-overlapping patches."""
    c, h, w = t.shape
    if h % p or w % p:
        raise ValueError(f"patch size {p} does not divide frame dims {(h, w)}")
    t = t.reshape(c, h // p, p, w // p, p)
    t = t.transpose(1, 3, 0, 2, 4)
    return t.reshape((h // p) * (w // p), c * p * p)


# ---------------------------------------------------------------------
# optimizer

@dataclass
class LrSchedule:
    """Learning-rate schedule: constant, or cosine decay with linear warmup."""
    kind: str = "constant"       # constant | cosine
    base_lr: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 1000
    min_lr: float = 0.0

    def lr(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        if self.kind == "constant":
            return self.base_lr
        if self.kind == "cosine":
            t = min(max(step - self.warmup_steps, 0),
                    max(self.total_steps - self.warmup_steps, 1))
            frac = t / max(self.total_steps - self.warmup_steps, 1)
            return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1 + np.cos(np.pi * frac))
        raise ValueError(f"unknown schedule kind {self.kind!r}")


@dataclass
class AdamW:
    """AdamW with decoupled weight decay and global gradient-norm clipping."""
    params: dict
    schedule: LrSchedule = field(default_factory=LrSchedule)
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    clip_norm: float | None = None

    def __post_init__(self):
        if isinstance(self.params, (list, tuple)):
            self.params = {f"p{i}": p for i, p in enumerate(self.params)}
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive")
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _clipped_grads(self) -> dict:
        grads = {}
        total = 0.0
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            _ensure_finite(g, f"gradient of parameter {k!r}")
            grads[k] = g
            total += float((g ** 2).sum())
        norm = np.sqrt(total)
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
        return grads

    def step(self) -> float:
        """One update over all parameters; returns the lr used."""
        grads = self._clipped_grads()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        lr = self.schedule.lr(t - 1)
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** t)
            vhat = self.v[k] / (1 - b2 ** t)
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps)
                                    + self.weight_decay * p.data)
        return lr


# ---------------------------------------------------------------------
# parameter checkpoints

_CKPT_MAGIC = b"ETCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params) -> None:
    """Write (name, shape, float64 data) records; bit-exact round trip."""
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", _CKPT_MAGIC, _CKPT_VERSION, len(params)))
        for name, p in params.items():
            # np.ascontiguousarray would promote 0-d arrays to 1-d
            arr = np.asarray(p.data if isinstance(p, Tensor) else p,
                             dtype="<f8", order="C")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        magic, version, count = struct.unpack("<4sII", f.read(12))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()
    return out
