"""Triplet embedding and density clustering, checked against a set-based
DBSCAN oracle."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from echotrack.autodiff import Tensor
from echotrack.grouping import (FrameGroup, dbscan, default_eps, embed_frames,
                                encode_frame, group_frames, groups_to_json,
                                init_encoder, one_hot_labels, train_embedding,
                                triplet_loss)
from helpers import dbscan_bruteforce


def unit(v):
    v = np.asarray(v, dtype=float)
    return Tensor(v / np.linalg.norm(v))


class TestTripletLoss:
    def test_zero_when_negative_far(self):
        a = unit([1, 0, 0])
        p = unit([1, 0.01, 0])
        n = unit([-1, 0, 0])
        assert float(triplet_loss(a, p, n, alpha=0.2).data) == 0.0

    def test_margin_when_equidistant(self):
        a = unit([1, 0, 0])
        p = unit([0, 1, 0])
        n = unit([0, 0, 1])
        # d_ap == d_an: loss equals the margin exactly
        assert np.isclose(float(triplet_loss(a, p, n, alpha=0.2).data), 0.2)

    @given(arrays(float, 4, elements=st.floats(-1, 1)),
           arrays(float, 4, elements=st.floats(-1, 1)),
           arrays(float, 4, elements=st.floats(-1, 1)))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative(self, a, p, n):
        loss = triplet_loss(Tensor(a), Tensor(p), Tensor(n))
        assert float(loss.data) >= 0.0


def test_encode_frame_unit_norm():
    params = init_encoder(0)
    e = encode_frame(params, np.random.default_rng(1).random((32, 32)))
    assert e.shape == (32,)
    assert np.isclose(np.linalg.norm(e.data), 1.0, atol=1e-6)


def test_embedding_training_separates_time():
    # two visually distinct halves: after training, frames within a half
    # should embed closer together than across halves
    rng = np.random.default_rng(3)
    bright = [np.clip(rng.random((32, 32)) * 0.3 + 0.7, 0, 1) for _ in range(8)]
    dark = [np.clip(rng.random((32, 32)) * 0.3, 0, 1) for _ in range(8)]
    frames = bright + dark
    params = train_embedding(frames, gap=8, iterations=40, seed=1)
    emb = embed_frames(params, frames)
    within = np.linalg.norm(emb[0] - emb[4])
    across = np.linalg.norm(emb[0] - emb[12])
    assert across > within


def test_train_embedding_rejects_short_sequence():
    frames = [np.zeros((32, 32))] * 5
    with pytest.raises(ValueError):
        train_embedding(frames, gap=10)


class TestDbscan:
    def test_matches_bruteforce_random(self):
        rng = np.random.default_rng(7)
        for trial in range(15):
            pts = rng.random((int(rng.integers(5, 40)), 3))
            eps = float(rng.uniform(0.1, 0.5))
            min_pts = int(rng.integers(2, 5))
            got = dbscan(pts, eps, min_pts)
            want = dbscan_bruteforce(pts, eps, min_pts)
            assert _same_partition(got, want, pts, eps, min_pts)

    def test_two_blobs_and_noise(self):
        pts = np.vstack([np.zeros((5, 2)) + [[0, 0]] + np.arange(5)[:, None] * 0.01,
                         np.zeros((5, 2)) + [[10, 10]] + np.arange(5)[:, None] * 0.01,
                         [[5, 5]]])
        labels = dbscan(pts, eps=0.5, min_pts=3)
        assert labels[10] == -1
        assert len(set(labels[:5])) == 1 and labels[0] >= 0
        assert len(set(labels[5:10])) == 1
        assert labels[0] != labels[5]

    def test_validation(self):
        with pytest.raises(ValueError):
            dbscan(np.zeros((3, 2)), eps=0.0, min_pts=2)
        with pytest.raises(ValueError):
            dbscan(np.zeros((3, 2)), eps=1.0, min_pts=0)

    def test_all_noise_when_sparse(self):
        pts = np.arange(6, dtype=float)[:, None] * 100
        assert np.all(dbscan(pts, eps=1.0, min_pts=2) == -1)


def _same_partition(a, b, pts, eps, min_pts):
    """Compare clusterings up to label permutation; border-point membership
    may legitimately differ between expansion orders, so compare core points
    strictly and border points by noise/non-noise status."""
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    core = (d <= eps).sum(axis=1) >= min_pts
    # noise sets must agree exactly
    if not np.array_equal(a == -1, b == -1):
        return False
    # core points: same-cluster relation must match
    ci = np.flatnonzero(core)
    for i in ci:
        for j in ci:
            if (a[i] == a[j]) != (b[i] == b[j]):
                return False
    return True


def test_group_frames_velocity_labels():
    emb = np.vstack([np.tile([0.0, 0.0], (4, 1)) + np.arange(4)[:, None] * 1e-3,
                     np.tile([5.0, 5.0], (4, 1)) + np.arange(4)[:, None] * 1e-3,
                     np.tile([9.0, 0.0], (4, 1)) + np.arange(4)[:, None] * 1e-3])
    vel = np.array([1, 1, 1, 1, -1, -1, -1, -1, 0.01, 0.01, -0.01, 0.0])
    groups = group_frames(emb, eps=0.1, min_pts=3, velocities=vel)
    labels = {tuple(g.members): g.label for g in groups}
    assert labels[(0, 1, 2, 3)] == "forward"
    assert labels[(4, 5, 6, 7)] == "backward"
    assert labels[(8, 9, 10, 11)] == "transition"


def test_group_frames_without_velocity_is_transition():
    emb = np.tile([1.0, 2.0], (5, 1)) + np.arange(5)[:, None] * 1e-4
    groups = group_frames(emb, eps=0.1, min_pts=3)
    assert all(g.label == "transition" for g in groups if g.group_id >= 0)


def test_one_hot_and_json_cover_all_frames():
    groups = [FrameGroup(0, [0, 1], "forward"), FrameGroup(1, [3], "backward")]
    recs = groups_to_json(groups, 5)
    assert [r["label"] for r in recs] == \
        ["forward", "forward", "noise", "backward", "noise"]
    oh = one_hot_labels(groups, 5)
    assert oh.shape == (5, 4)
    assert np.all(oh.sum(axis=1) == 1.0)


def test_default_eps_positive():
    rng = np.random.default_rng(0)
    assert default_eps(rng.random((10, 4))) > 0
    assert default_eps(np.zeros((3, 4))) > 0
