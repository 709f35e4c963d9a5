"""6-DoF rigid-transform algebra.

Poses are 3 translations in mm plus 3 intrinsic Z-Y-X Euler angles in
degrees.  Composition, trajectory accumulation, image-plane corner
propagation, and the plain-text trajectory interchange format live here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Pose6DoF:
    """Rigid transform: translation (mm) + intrinsic Z-Y-X Euler rotation (deg)."""
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    def __post_init__(self):
        vals = (self.tx, self.ty, self.tz, self.rx, self.ry, self.rz)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose components: {vals}")
        for name in ("rx", "ry", "rz"):
            object.__setattr__(self, name, _wrap_angle(getattr(self, name)))

    @classmethod
    def identity(cls) -> "Pose6DoF":
        return cls()

    @classmethod
    def from_vector(cls, v) -> "Pose6DoF":
        v = np.asarray(v, dtype=float).reshape(6)
        return cls(*v)

    def to_vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.rx, self.ry, self.rz])

    def near_gimbal_lock(self, margin_deg: float = 0.5) -> bool:
        return abs(abs(self.ry) - 90.0) < margin_deg


def _wrap_angle(a: float) -> float:
    """Normalize an angle in degrees to (-180, 180]."""
    a = a % 360.0
    if a > 180.0:
        a -= 360.0
    return a


def rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    """3x3 rotation for intrinsic Z-Y-X Euler angles in degrees: Rz @ Ry @ Rx."""
    ax, ay, az = np.radians([rx, ry, rz])
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rz_m = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    ry_m = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx_m = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    return rz_m @ ry_m @ rx_m


def pose_to_matrix(p: Pose6DoF) -> np.ndarray:
    """4x4 homogeneous matrix."""
    m = np.eye(4)
    m[:3, :3] = rotation_matrix(p.rx, p.ry, p.rz)
    m[:3, 3] = (p.tx, p.ty, p.tz)
    return m


def matrix_to_pose(m: np.ndarray) -> Pose6DoF:
    """Inverse of pose_to_matrix; breaks down at |ry| = 90 deg (gimbal lock)."""
    r = m[:3, :3]
    ry = math.degrees(math.atan2(-r[2, 0], math.hypot(r[0, 0], r[1, 0])))
    if abs(abs(ry) - 90.0) < 1e-9:
        # gimbal lock: rz and rx are coupled; put all of it in rz
        rz = math.degrees(math.atan2(-r[0, 1], r[1, 1]))
        rx = 0.0
    else:
        rz = math.degrees(math.atan2(r[1, 0], r[0, 0]))
        rx = math.degrees(math.atan2(r[2, 1], r[2, 2]))
    return Pose6DoF(m[0, 3], m[1, 3], m[2, 3], rx, ry, rz)


def compose(a: Pose6DoF, b: Pose6DoF) -> Pose6DoF:
    """Pose whose matrix is matrix(a) @ matrix(b)."""
    return matrix_to_pose(pose_to_matrix(a) @ pose_to_matrix(b))


def inverse(p: Pose6DoF) -> Pose6DoF:
    m = pose_to_matrix(p)
    inv = np.eye(4)
    inv[:3, :3] = m[:3, :3].T
    inv[:3, 3] = -m[:3, :3].T @ m[:3, 3]
    return matrix_to_pose(inv)


def relative(a: Pose6DoF, b: Pose6DoF) -> Pose6DoF:
    """Pose taking frame a to frame b: inverse(a) ∘ b."""
    return compose(inverse(a), b)


class Trajectory:
    """Ordered absolute poses, one per frame; poses[0] is always identity."""

    def __init__(self, poses: list[Pose6DoF]):
        if not poses:
            raise ValueError("trajectory needs at least one pose")
        first = poses[0].to_vector()
        if not np.allclose(first, 0.0, atol=1e-9):
            raise ValueError("trajectory must start at the identity pose")
        self.poses = list(poses)

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i) -> Pose6DoF:
        return self.poses[i]

    def __iter__(self):
        return iter(self.poses)

    def relatives(self) -> list[Pose6DoF]:
        return [relative(a, b) for a, b in zip(self.poses[:-1], self.poses[1:])]

    def path_length(self) -> float:
        """Sum of per-step translation norms of the relative motions, mm."""
        return float(sum(np.linalg.norm(r.to_vector()[:3]) for r in self.relatives()))


def accumulate(relatives: list[Pose6DoF]) -> Trajectory:
    """Chain relative motions into absolute poses; empty input -> [identity]."""
    poses = [Pose6DoF.identity()]
    for r in relatives:
        poses.append(compose(poses[-1], r))
    return Trajectory(poses)


def plane_corners(plane_extent: tuple[float, float]) -> np.ndarray:
    """The 4 image-plane corners (+-w/2, +-h/2, 0) in mm, shape (4, 3)."""
    w, h = plane_extent
    if w <= 0 or h <= 0:
        raise ValueError(f"plane extents must be positive, got {plane_extent}")
    return np.array([[-w / 2, -h / 2, 0.0],
                     [w / 2, -h / 2, 0.0],
                     [w / 2, h / 2, 0.0],
                     [-w / 2, h / 2, 0.0]])


def propagate_corners(traj: Trajectory, plane_extent: tuple[float, float]) -> np.ndarray:
    """Map the plane corners through every absolute pose; shape (M, 4, 3)."""
    corners = plane_corners(plane_extent)
    out = np.empty((len(traj), 4, 3))
    for m, p in enumerate(traj):
        mat = pose_to_matrix(p)
        out[m] = corners @ mat[:3, :3].T + mat[:3, 3]
    return out


# ---------------------------------------------------------------------
# trajectory file format: one `tx ty tz rx ry rz` line per frame

def save_trajectory(path, traj: Trajectory) -> None:
    with open(path, "w") as f:
        f.write("# tx ty tz rx ry rz  (mm / deg, intrinsic Z-Y-X Euler)\n")
        for p in traj:
            f.write(" ".join(f"{v:.9f}" for v in p.to_vector()) + "\n")


def load_trajectory(path) -> Trajectory:
    poses = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 6:
                raise ValueError(f"trajectory line needs 6 values, got {len(vals)}")
            poses.append(Pose6DoF(*vals))
    return Trajectory(poses)
