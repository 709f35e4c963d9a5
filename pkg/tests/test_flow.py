"""Block-matching optical flow: known shifts, gain robustness, confidence."""

import numpy as np
import pytest

from echotrack.flow import FlowField, estimate_flow, flow_features, median_flow


def textured(seed=0, size=64):
    rng = np.random.default_rng(seed)
    img = rng.random((size + 16, size + 16))
    # smooth a little so blocks are matchable but not aliased
    from scipy.ndimage import gaussian_filter
    return gaussian_filter(img, 1.0)


def shifted_pair(dx, dy, seed=0, size=64):
    """Scene content moves by (dx, dy) pixels from frame a to frame b."""
    big = textured(seed, size)
    a = big[8:8 + size, 8:8 + size]
    b = big[8 - dy:8 - dy + size, 8 - dx:8 - dx + size]
    return a, b


def test_integer_shift_recovered():
    a, b = shifted_pair(3, 0)
    field = estimate_flow(a, b)
    u, v = median_flow(field)
    assert abs(u - 3.0) < 0.25
    assert abs(v) < 0.25


def test_diagonal_shift_recovered():
    a, b = shifted_pair(2, -4)
    field = estimate_flow(a, b)
    u, v = median_flow(field)
    assert abs(u - 2.0) < 0.3
    assert abs(v + 4.0) < 0.3


def test_zero_motion():
    a, _ = shifted_pair(0, 0)
    field = estimate_flow(a, a)
    u, v = median_flow(field)
    assert abs(u) < 1e-6 and abs(v) < 1e-6


def test_gain_invariance():
    # multiplicative brightness change must not masquerade as motion
    a, b = shifted_pair(3, 0)
    field = estimate_flow(a, np.clip(b * 1.2, 0, 1))
    u, v = median_flow(field)
    assert abs(u - 3.0) < 1.0
    assert abs(v) < 1.0


def test_textureless_blocks_zero_confidence():
    flat = np.full((64, 64), 0.5)
    field = estimate_flow(flat, flat)
    assert np.all(field.confidence < 1e-6)
    assert np.all(field.u == 0.0)


def test_confidence_in_unit_range():
    a, b = shifted_pair(1, 1)
    field = estimate_flow(a, b)
    assert field.confidence.min() >= 0.0
    assert field.confidence.max() <= 1.0


def test_flowfield_rejects_non_finite():
    with pytest.raises(ValueError):
        FlowField(np.array([[np.nan]]), np.zeros((1, 1)), np.zeros((1, 1)))


def test_flow_features_shape_and_pooling():
    a, b = shifted_pair(2, 0)
    field = estimate_flow(a, b)
    feat = flow_features(field, grid=8)
    assert feat.shape == (8, 8, 3)
    # pooled u should reflect the uniform shift where confident
    conf = feat.data[:, :, 2] > 0.5
    assert conf.any()
    assert abs(np.median(feat.data[:, :, 0][conf]) - 2.0) < 0.5


def test_median_flow_ignores_unconfident():
    u = np.full((4, 4), 5.0)
    v = np.zeros((4, 4))
    conf = np.zeros((4, 4))
    conf[0, 0] = 1.0
    u[0, 0] = 1.0
    field = FlowField(u, v, conf)
    mu, mv = median_flow(field, min_confidence=0.5)
    assert mu == 1.0 and mv == 0.0
