"""Gradient checks against central finite differences, plus optimizer and
checkpoint behavior."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echotrack.autodiff import (AdamW, LrSchedule, NonFiniteError, Tensor,
                                dropout, dropout_mask, load_checkpoint,
                                patchify, rng_stream, save_checkpoint)
from helpers import check_grad

RNG = np.random.default_rng(0)


def rand(*shape):
    return RNG.standard_normal(shape)


class TestGradients:
    def test_add_broadcast(self):
        b = rand(3)
        check_grad(lambda t: ((t + Tensor(b)) * (t + Tensor(b))).sum(), rand(4, 3))

    def test_mul(self):
        other = rand(4, 3)
        check_grad(lambda t: (t * Tensor(other)).sum(), rand(4, 3))

    def test_div(self):
        other = np.abs(rand(3)) + 1.0
        check_grad(lambda t: (t / Tensor(other)).squared_norm(), rand(2, 3))

    def test_pow(self):
        check_grad(lambda t: (t ** 3.0).sum(), np.abs(rand(5)) + 0.5)

    def test_matmul_2d(self):
        b = rand(3, 2)
        check_grad(lambda t: (t @ Tensor(b)).squared_norm(), rand(4, 3))

    def test_matmul_vector_right(self):
        v = rand(3)
        check_grad(lambda t: (t @ Tensor(v)).squared_norm(), rand(4, 3))

    def test_matmul_vector_left(self):
        m = rand(3, 4)
        check_grad(lambda t: (t @ Tensor(m)).squared_norm(), rand(3))

    def test_matmul_inner(self):
        v = rand(5)
        check_grad(lambda t: (t @ Tensor(v)) * (t @ Tensor(v)), rand(5))

    def test_sigmoid(self):
        check_grad(lambda t: t.sigmoid().sum(), rand(4, 4))

    def test_softmax(self):
        w = rand(3, 5)
        check_grad(lambda t: (t.softmax(axis=-1) * Tensor(w)).sum(), rand(3, 5))

    def test_relu(self):
        # keep entries away from the kink
        x = rand(6, 6)
        x[np.abs(x) < 0.05] = 0.5
        check_grad(lambda t: t.relu().squared_norm(), x)

    def test_sin_cos(self):
        check_grad(lambda t: (t.sin() * t.cos()).sum(), rand(7))

    def test_sqrt(self):
        check_grad(lambda t: t.sqrt().sum(), np.abs(rand(6)) + 0.5)

    def test_sum_axis(self):
        check_grad(lambda t: t.sum(axis=1).squared_norm(), rand(3, 4))

    def test_mean(self):
        check_grad(lambda t: (t.mean(axis=0) ** 2.0).sum(), rand(5, 2))

    def test_squared_norm(self):
        check_grad(lambda t: t.squared_norm(), rand(3, 3))

    def test_l2norm(self):
        check_grad(lambda t: t.l2norm(), rand(8) + 2.0)

    def test_reshape_transpose_slice(self):
        def f(t):
            u = t.reshape(2, 6).transpose(1, 0)
            return u[2:5].squared_norm()
        check_grad(f, rand(3, 4))

    def test_concatenate(self):
        b = rand(2, 3)
        def f(t):
            return Tensor.concatenate([t, Tensor(b), t], axis=0).squared_norm()
        check_grad(f, rand(2, 3))

    def test_patchify(self):
        w = rand(8, 3)
        check_grad(lambda t: (patchify(t, 2) @ Tensor(w)).squared_norm(),
                   rand(2, 4, 4))

    def test_dropout_pathway(self):
        mask = dropout_mask((4, 4), 0.5, rng_stream(3, 0))
        check_grad(lambda t: (t * Tensor(mask)).squared_norm(), rand(4, 4))

    def test_composite_stack(self):
        w1, w2 = rand(6, 5), rand(5, 1)
        def f(t):
            h = (t @ Tensor(w1)).sigmoid()
            h = h.softmax(axis=-1)
            return (h @ Tensor(w2)).squared_norm()
        check_grad(f, rand(3, 6))


def test_backward_requires_scalar():
    t = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ValueError):
        (t * 2.0).backward()


def test_non_finite_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.nan]))


def test_gradient_accumulates_on_reuse():
    t = Tensor(np.array([3.0]), requires_grad=True)
    y = (t * t + t * t).sum()
    y.backward()
    assert np.allclose(t.grad, [12.0])


@given(st.floats(0.01, 0.9))
@settings(max_examples=20, deadline=None)
def test_dropout_mask_mean_one(rate):
    mask = dropout_mask((200, 200), rate, rng_stream(0, 1))
    assert set(np.unique(mask)) <= {0.0, 1.0 / (1.0 - rate)}
    assert abs(mask.mean() - 1.0) < 0.05


def test_dropout_zero_rate_identity():
    t = Tensor(np.ones((3, 3)))
    out = dropout(t, 0.0, rng_stream(0, 0))
    assert np.array_equal(out.data, t.data)


def test_rng_streams_independent():
    a = rng_stream(7, 0).random(5)
    b = rng_stream(7, 1).random(5)
    a2 = rng_stream(7, 0).random(5)
    assert np.array_equal(a, a2)
    assert not np.array_equal(a, b)


class TestOptimizer:
    def test_clip_scales_to_threshold(self):
        p = Tensor(np.zeros(4), requires_grad=True)
        p.grad = np.array([6.0, 8.0, 0.0, 0.0])   # norm 10
        opt = AdamW({"p": p}, clip_norm=1.0)
        g = opt._clipped_grads()["p"]
        assert np.allclose(g, [0.6, 0.8, 0.0, 0.0])
        assert np.isclose(np.linalg.norm(g), 1.0)

    def test_clip_noop_below_threshold(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        p.grad = np.array([0.3, 0.4])
        opt = AdamW({"p": p}, clip_norm=1.0)
        assert np.allclose(opt._clipped_grads()["p"], [0.3, 0.4])

    def test_first_step_matches_closed_form(self):
        # with bias correction the first Adam step moves by ~lr * sign(g)
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -3.0])
        opt = AdamW({"p": p}, schedule=LrSchedule(base_lr=0.1))
        opt.step()
        expect = np.array([1.0, -2.0]) - 0.1 * np.sign([0.5, -3.0]) \
            * (np.abs([0.5, -3.0]) / (np.abs([0.5, -3.0]) + 1e-8))
        assert np.allclose(p.data, expect, atol=1e-6)

    def test_decoupled_weight_decay(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        p.grad = np.array([0.0])
        opt = AdamW({"p": p}, schedule=LrSchedule(base_lr=0.1), weight_decay=0.5)
        opt.step()
        # zero gradient: only the decay term moves the weight
        assert np.allclose(p.data, [10.0 - 0.1 * 0.5 * 10.0])

    def test_converges_on_quadratic(self):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = AdamW({"p": p}, schedule=LrSchedule(base_lr=0.3))
        for _ in range(200):
            opt.zero_grad()
            loss = p.squared_norm()
            loss.backward()
            opt.step()
        assert np.abs(p.data).max() < 1e-2

    def test_cosine_schedule_endpoints(self):
        s = LrSchedule(kind="cosine", base_lr=1.0, warmup_steps=10,
                       total_steps=110)
        assert np.isclose(s.lr(0), 0.1)
        assert np.isclose(s.lr(9), 1.0)
        assert s.lr(10) <= 1.0
        assert s.lr(109) < 1e-3


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    params = {"a": Tensor(RNG.standard_normal((3, 4, 5))),
              "b": Tensor(np.array(2.5)),
              "deep/name": Tensor(RNG.standard_normal(7))}
    path = tmp_path / "ck.etck"
    save_checkpoint(path, params)
    out = load_checkpoint(path)
    assert set(out) == set(params)
    for k in params:
        assert out[k].dtype == np.float64
        assert np.array_equal(out[k], np.asarray(params[k].data))


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.etck"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(path)
