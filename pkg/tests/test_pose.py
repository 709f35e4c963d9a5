"""Rigid-transform algebra: round trips, composition, corner propagation,
trajectory file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echotrack.pose import (Pose6DoF, Trajectory, accumulate, compose,
                            inverse, load_trajectory, matrix_to_pose,
                            plane_corners, pose_to_matrix, propagate_corners,
                            relative, rotation_matrix, save_trajectory)

angles = st.floats(-179.0, 179.0)
trans = st.floats(-50.0, 50.0)
# stay away from the |ry| = 90 gimbal singularity
ry_angles = st.floats(-85.0, 85.0)


def pose_st():
    return st.builds(Pose6DoF, trans, trans, trans, angles, ry_angles, angles)


def test_rotation_matrix_order():
    # intrinsic z-y-x composition: R = Rz @ Ry @ Rx
    rx, ry, rz = 10.0, 20.0, 30.0
    cx, sx = np.cos(np.radians(rx)), np.sin(np.radians(rx))
    cy, sy = np.cos(np.radians(ry)), np.sin(np.radians(ry))
    cz, sz = np.cos(np.radians(rz)), np.sin(np.radians(rz))
    rxm = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rym = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rzm = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    assert np.allclose(rotation_matrix(rx, ry, rz), rzm @ rym @ rxm, atol=1e-12)


@given(pose_st())
@settings(max_examples=100, deadline=None)
def test_matrix_roundtrip(p):
    q = matrix_to_pose(pose_to_matrix(p))
    assert np.allclose(q.to_vector(), p.to_vector(), atol=1e-9)


@given(pose_st())
@settings(max_examples=60, deadline=None)
def test_rotation_orthonormal(p):
    r = pose_to_matrix(p)[:3, :3]
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(r), 1.0, atol=1e-12)


@given(pose_st())
@settings(max_examples=60, deadline=None)
def test_compose_inverse_identity(p):
    q = compose(p, inverse(p))
    assert np.allclose(q.to_vector(), np.zeros(6), atol=1e-8)


@given(pose_st(), pose_st())
@settings(max_examples=60, deadline=None)
def test_compose_matches_matrix_product(a, b):
    m = pose_to_matrix(a) @ pose_to_matrix(b)
    assert np.allclose(pose_to_matrix(compose(a, b)), m, atol=1e-9)


@given(pose_st(), pose_st())
@settings(max_examples=60, deadline=None)
def test_relative_recovers_target(a, b):
    rel = relative(a, b)
    assert np.allclose(compose(a, rel).to_vector(), b.to_vector(), atol=1e-7)


def test_angle_wrapping():
    p = Pose6DoF(0, 0, 0, 190.0, 0, -190.0)
    assert np.isclose(p.rx, -170.0)
    assert np.isclose(p.rz, 170.0)


def test_gimbal_flagging():
    assert Pose6DoF(0, 0, 0, 0, 89.8, 0).near_gimbal_lock()
    assert not Pose6DoF(0, 0, 0, 0, 45.0, 0).near_gimbal_lock()


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        Pose6DoF(np.nan, 0, 0, 0, 0, 0)


def test_trajectory_starts_at_identity():
    with pytest.raises(ValueError):
        Trajectory([Pose6DoF(1, 0, 0, 0, 0, 0), Pose6DoF.identity()])


def test_accumulate_and_relatives_inverse():
    rels = [Pose6DoF(1, 0.5, 0, 2, 1, -3), Pose6DoF(0, 1, 1, 0, 4, 2)]
    traj = accumulate(rels)
    back = traj.relatives()
    for r, b in zip(rels, back):
        assert np.allclose(r.to_vector(), b.to_vector(), atol=1e-9)


def test_path_length_straight_line():
    rels = [Pose6DoF(0, 3, 4, 0, 0, 0)] * 5
    assert np.isclose(accumulate(rels).path_length(), 25.0)


def test_plane_corners_layout():
    c = plane_corners((10.0, 6.0))
    assert c.shape == (4, 3)
    assert np.allclose(np.abs(c[:, 0]), 5.0)
    assert np.allclose(np.abs(c[:, 1]), 3.0)
    assert np.allclose(c[:, 2], 0.0)


@given(pose_st())
@settings(max_examples=40, deadline=None)
def test_corner_rigidity(p):
    # pairwise corner distances are preserved under any rigid transform
    traj = Trajectory([Pose6DoF.identity(), p])
    corners = propagate_corners(traj, (20.0, 12.0))
    d0 = np.linalg.norm(corners[0][:, None] - corners[0][None], axis=2)
    d1 = np.linalg.norm(corners[1][:, None] - corners[1][None], axis=2)
    assert np.allclose(d0, d1, atol=1e-8)


def test_pure_translation_moves_corners_uniformly():
    traj = Trajectory([Pose6DoF.identity(), Pose6DoF(1.0, 2.0, 3.0)])
    corners = propagate_corners(traj, (8.0, 8.0))
    assert np.allclose(corners[1] - corners[0], [1.0, 2.0, 3.0])


def test_trajectory_file_roundtrip(tmp_path):
    traj = accumulate([Pose6DoF(0.25, -1, 2, 3, -4, 5),
                       Pose6DoF(1, 1, 1, 0, 0, 90)])
    path = tmp_path / "traj.txt"
    save_trajectory(path, traj)
    text = path.read_text()
    assert len([ln for ln in text.splitlines()
                if ln.strip() and not ln.startswith("#")]) == 3
    back = load_trajectory(path)
    for a, b in zip(traj, back):
        assert np.allclose(a.to_vector(), b.to_vector(), atol=1e-9)


def test_trajectory_file_comments(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("# header\n0 0 0 0 0 0\n# mid\n1 2 3 4 5 6\n")
    traj = load_trajectory(path)
    assert len(traj) == 2
    assert np.allclose(traj[1].to_vector(), [1, 2, 3, 4, 5, 6])
