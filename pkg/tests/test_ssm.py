"""State-space recurrence against hand-unrolled references."""

import numpy as np
import pytest

from echotrack.autodiff import Tensor
from echotrack.ssm import (SSMParams, derive_orderings, dual_mamba,
                           init_ssm, inner_mamba, ssm_scan,
                           _inverse_permutation, _nearest_chain)


def scalar_params(a, b, c, d):
    return SSMParams(A=Tensor(np.array([[a]])), B=Tensor(np.array([[b]])),
                     C=Tensor(np.array([[c]])), D=Tensor(np.array([[d]])))


def test_scalar_recurrence_hand_unrolled():
    # h_t = 0.5 h_{t-1} + f_t, y_t = h_t with ones input: y = 1, 1.5, 1.75
    p = scalar_params(0.5, 1.0, 1.0, 0.0)
    y = ssm_scan(Tensor(np.ones((3, 1))), p)
    assert np.max(np.abs(y.data.ravel() - [1.0, 1.5, 1.75])) <= 1e-12


def test_matrix_recurrence_hand_unrolled():
    rng = np.random.default_rng(4)
    d_h, d_f, d_o, t_total = 3, 2, 2, 6
    A = rng.normal(0, 0.3, (d_h, d_h))
    B = rng.normal(size=(d_h, d_f))
    C = rng.normal(size=(d_o, d_h))
    D = rng.normal(size=(d_o, d_f))
    f = rng.normal(size=(t_total, d_f))
    p = SSMParams(A=Tensor(A), B=Tensor(B), C=Tensor(C), D=Tensor(D))
    got = ssm_scan(Tensor(f), p).data

    h = np.zeros(d_h)
    want = []
    for t in range(t_total):
        h = A @ h + B @ f[t]
        want.append(C @ h + D @ f[t])
    assert np.max(np.abs(got - np.stack(want))) <= 1e-12


def test_window_reset_hand_unrolled():
    p = scalar_params(0.5, 1.0, 1.0, 0.0)
    y = ssm_scan(Tensor(np.ones((5, 1))), p, window=2).data.ravel()
    # resets at t = 0, 2, 4: y = 1, 1.5, 1, 1.5, 1
    assert np.max(np.abs(y - [1.0, 1.5, 1.0, 1.5, 1.0])) <= 1e-12


def test_causality():
    # changing a later input never changes an earlier output
    p = init_ssm(0, d_h=4, d_f=3, d_o=2)
    f = np.random.default_rng(1).normal(size=(6, 3))
    base = ssm_scan(Tensor(f), p).data.copy()
    f2 = f.copy()
    f2[4] += 10.0
    out = ssm_scan(Tensor(f2), p).data
    assert np.array_equal(out[:4], base[:4])
    assert not np.allclose(out[4], base[4])


def test_inner_mamba_window_bounds_context():
    p = init_ssm(0, d_h=4, d_f=3, d_o=2)
    f = np.random.default_rng(2).normal(size=(8, 3))
    base = inner_mamba(Tensor(f), p, window=4).data.copy()
    f2 = f.copy()
    f2[1] += 5.0   # inside the first window only
    out = inner_mamba(Tensor(f2), p, window=4).data
    # second window (t = 4..7) starts from a fresh state: unaffected
    assert np.array_equal(out[4:], base[4:])
    assert not np.allclose(out[1:4], base[1:4])


def test_spectral_projection():
    p = scalar_params(3.0, 1.0, 1.0, 0.0)
    p.A.data = np.array([[3.0]])
    assert p.spectral_radius() > 1.0
    p.project_spectral(1.0)
    assert p.spectral_radius() <= 1.0 + 1e-12
    # already-stable matrices are untouched
    q = scalar_params(0.5, 1, 1, 0)
    q.project_spectral(1.0)
    assert q.A.data[0, 0] == 0.5


def test_init_ssm_stable_and_deterministic():
    a = init_ssm(3)
    b = init_ssm(3)
    assert a.spectral_radius() <= 1.0 + 1e-12
    assert np.array_equal(a.A.data, b.A.data)
    assert not np.array_equal(a.A.data, init_ssm(4).A.data)


def test_orderings_are_permutations():
    emb = np.random.default_rng(5).normal(size=(9, 4))
    pi_f, pi_n = derive_orderings(emb)
    assert sorted(pi_f) == list(range(9))
    assert sorted(pi_n) == list(range(9))
    assert pi_f[0] == 0 and pi_n[0] == 0


def test_nearest_chain_on_line():
    emb = np.array([[0.0], [3.0], [1.0], [2.0]])
    # walk: 0 -> 2 (d=1) -> 3 (d=1) -> 1
    assert list(_nearest_chain(emb)) == [0, 2, 3, 1]


def test_inverse_permutation():
    pi = np.array([2, 0, 3, 1])
    inv = _inverse_permutation(pi)
    assert np.array_equal(pi[inv], np.arange(4))
    assert np.array_equal(inv[pi], np.arange(4))


def test_dual_mamba_identity_orderings_gate_blend():
    # with both orderings identical, the fused output must lie between the
    # two stream outputs elementwise (convex combination)
    rng = np.random.default_rng(6)
    m, d_o = 5, 3
    pf = init_ssm(1, d_h=4, d_f=d_o, d_o=d_o)
    pn = init_ssm(2, d_h=4, d_f=d_o, d_o=d_o)
    y = Tensor(rng.normal(size=(m, d_o)))
    ident = np.arange(m)
    w_gate = Tensor(rng.normal(0, 0.3, (2 * d_o, d_o)))
    fused = dual_mamba(y, ident, ident, pf, pn, w_gate).data
    of = ssm_scan(y, pf).data
    on = ssm_scan(y, pn).data
    lo = np.minimum(of, on)
    hi = np.maximum(of, on)
    assert np.all(fused >= lo - 1e-12) and np.all(fused <= hi + 1e-12)


def test_dual_mamba_unpermutes_outputs():
    # permuting the processing order must not permute the output alignment:
    # row t of the result always corresponds to token t
    rng = np.random.default_rng(7)
    m, d_o = 6, 2
    pf = init_ssm(1, d_h=3, d_f=d_o, d_o=d_o)
    pn = init_ssm(2, d_h=3, d_f=d_o, d_o=d_o)
    y = Tensor(rng.normal(size=(m, d_o)))
    pi = np.array([3, 1, 5, 0, 4, 2])
    w_gate = Tensor(np.zeros((2 * d_o, d_o)))   # gate 0.5 everywhere
    fused = dual_mamba(y, pi, pi, pf, pn, w_gate).data
    # reference: run streams on permuted input, un-permute by hand
    of = ssm_scan(y[pi], pf).data[_inverse_permutation(pi)]
    on = ssm_scan(y[pi], pn).data[_inverse_permutation(pi)]
    assert np.allclose(fused, 0.5 * of + 0.5 * on, atol=1e-12)


def test_dual_mamba_rejects_bad_ordering():
    y = Tensor(np.zeros((4, 2)))
    pf = init_ssm(1, d_h=3, d_f=2, d_o=2)
    pn = init_ssm(2, d_h=3, d_f=2, d_o=2)
    with pytest.raises(ValueError):
        dual_mamba(y, np.array([0, 0, 1, 2]), np.arange(4), pf, pn,
                   Tensor(np.zeros((4, 2))))
