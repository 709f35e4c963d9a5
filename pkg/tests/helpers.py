"""Shared test utilities: finite differences and brute-force oracles.

Oracles here are written independently of the library implementations
(double loops, exhaustive search) so each check has two routes to the
answer.
"""

import numpy as np

from echotrack.autodiff import Tensor


def fd_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def check_grad(build, x: np.ndarray, rtol: float = 1e-4,
               atol: float = 1e-7, eps: float = 1e-5) -> float:
    """Compare autodiff gradient of `build(Tensor) -> scalar Tensor` vs FD.

    Returns the max relative error; asserts it is within tolerance.
    """
    t = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    out = build(t)
    out.backward()
    ana = t.grad.copy()
    num = fd_grad(lambda a: float(build(Tensor(a)).data), np.array(x))
    denom = np.maximum(np.abs(num), np.abs(ana))
    err = np.abs(ana - num) / np.maximum(denom, atol / rtol)
    assert np.all(err <= rtol), f"grad mismatch: max rel err {err.max():.3e}"
    return float(err.max())


def fps_bruteforce(points: np.ndarray, k: int, start: int = 0) -> list:
    """Exhaustive greedy max-min selection; ties to the lowest index."""
    n = len(points)
    selected = [start]
    while len(selected) < k:
        best, best_d = None, -1.0
        for i in range(n):
            if i in selected:
                continue
            d = min(float(np.linalg.norm(points[i] - points[j]))
                    for j in selected)
            if d > best_d + 1e-15:
                best, best_d = i, d
        selected.append(best)
    return selected


def dbscan_bruteforce(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Set-based DBSCAN: connected components of core points plus borders."""
    n = len(points)
    d = np.linalg.norm(points[:, None] - points[None, :], axis=2)
    neigh = [set(np.flatnonzero(d[i] <= eps)) for i in range(n)]
    core = [len(neigh[i]) >= min_pts for i in range(n)]
    labels = -np.ones(n, dtype=int)
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        stack = [i]
        labels[i] = cluster
        while stack:
            j = stack.pop()
            if not core[j]:
                continue
            for q in sorted(neigh[j]):
                if labels[q] == -1:
                    labels[q] = cluster
                    stack.append(q)
        cluster += 1
    return labels


def hausdorff_bruteforce(a: np.ndarray, b: np.ndarray) -> float:
    def directed(p, q):
        return max(min(float(np.linalg.norm(x - y)) for y in q) for x in p)
    return max(directed(a, b), directed(b, a))
