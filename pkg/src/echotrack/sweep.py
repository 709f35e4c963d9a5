"""Synthetic freehand-sweep generator.

Frames are slices of a static band-limited 3-D noise phantom sampled along a
known 6-DoF trajectory, so every sequence comes with exact ground truth.
Stress cases mirror what breaks real acquisitions: speed bursts, brightness
drift, back-and-forth scanning, and loss of acoustic contact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from .autodiff import rng_stream
from .pose import Pose6DoF, Trajectory, accumulate, pose_to_matrix

PIXEL_SPACING_MM = 0.5   # fixed mm per pixel; keeps metric units well-defined
VOXEL_SPACING_MM = 1.0
FRAME_DT_S = 1.0 / 30.0

_RNG_VOLUME = 0
_RNG_NOISE = 1

MOTION_MODELS = ("linear", "back-and-forth", "arc")


@dataclass(frozen=True)
class Frame:
    """One grayscale image with acquisition timestamp."""
    intensities: np.ndarray   # (H, W) in [0, 1]
    timestamp: float

    @property
    def height(self):
        return self.intensities.shape[0]

    @property
    def width(self):
        return self.intensities.shape[1]

    @property
    def extent_mm(self) -> tuple[float, float]:
        return (self.width * PIXEL_SPACING_MM, self.height * PIXEL_SPACING_MM)


@dataclass
class SweepSpec:
    """Everything needed to regenerate a sequence bit-identically."""
    motion: str = "linear"
    base_speed: float = 1.0            # mm per frame
    num_frames: int = 40
    seed: int = 0
    frame_size: tuple = (64, 64)       # (H, W) pixels
    bursts: list = field(default_factory=list)    # [start, end, multiplier]
    brightness_amplitude: float = 0.0
    noise_level: float = 0.02
    turn_frames: list = field(default_factory=list)  # back-and-forth sign flips
    arc_deg_per_frame: float = 1.0
    # unit direction of probe motion in the frame's local axes; default mixes
    # in-plane (y) and out-of-plane (z) so optical flow sees the motion
    direction: tuple = (0.0, 0.6, 0.8)

    def __post_init__(self):
        if self.motion not in MOTION_MODELS:
            raise ValueError(f"unknown motion model {self.motion!r}")
        if self.num_frames < 2:
            raise ValueError("a sweep needs at least 2 frames")
        if not 0.0 <= self.brightness_amplitude < 1.0:
            raise ValueError("brightness amplitude must be in [0, 1)")
        for b in self.bursts:
            s, e, mult = b
            if mult <= 0:
                raise ValueError("burst multipliers must be positive")
            if not 0 <= s <= e < self.num_frames:
                raise ValueError(f"burst segment {b} outside frame range")
        for t in self.turn_frames:
            if not 0 < t < self.num_frames:
                raise ValueError(f"turn frame {t} outside frame range")
        d = np.asarray(self.direction, dtype=float)
        if np.linalg.norm(d) == 0:
            raise ValueError("motion direction must be nonzero")
        self.direction = tuple(d / np.linalg.norm(d))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SweepSpec":
        raw = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown sweep-spec keys: {sorted(unknown)}")
        if "frame_size" in raw:
            raw["frame_size"] = tuple(raw["frame_size"])
        if "direction" in raw:
            raw["direction"] = tuple(raw["direction"])
        if "bursts" in raw:
            raw["bursts"] = [list(b) for b in raw["bursts"]]
        return cls(**raw)


@dataclass
class SweepSequence:
    frames: list
    gt_relatives: list
    spec: SweepSpec

    def __post_init__(self):
        if len(self.frames) != len(self.gt_relatives) + 1:
            raise ValueError("frame count must be one more than relative-pose count")

    def __len__(self):
        return len(self.frames)

    def gt_trajectory(self) -> Trajectory:
        return accumulate(self.gt_relatives)

    @property
    def plane_extent(self) -> tuple[float, float]:
        return self.frames[0].extent_mm


# ---------------------------------------------------------------------
# ground-truth motion

def _speed_multiplier(spec: SweepSpec, m: int) -> float:
    mult = 1.0
    for s, e, k in spec.bursts:
        if s <= m <= e:
            mult *= k
    return mult


def _direction_sign(spec: SweepSpec, m: int) -> float:
    if spec.motion != "back-and-forth":
        return 1.0
    flips = sum(1 for t in spec.turn_frames if m >= t)
    return -1.0 if flips % 2 else 1.0


def ground_truth_relatives(spec: SweepSpec) -> list[Pose6DoF]:
    """Relative pose for each consecutive frame pair, index m = 1..M-1."""
    d = np.asarray(spec.direction)
    rels = []
    for m in range(1, spec.num_frames):
        step = spec.base_speed * _speed_multiplier(spec, m) * _direction_sign(spec, m)
        t = step * d
        ry = spec.arc_deg_per_frame if spec.motion == "arc" else 0.0
        rels.append(Pose6DoF(t[0], t[1], t[2], 0.0, ry, 0.0))
    return rels


# ---------------------------------------------------------------------
# phantom + rendering

def _noise_volume(seed: int, shape=(96, 96, 96)) -> np.ndarray:
    """Smoothed white noise, 3 octaves, normalized to [0, 1]."""
    rng = rng_stream(seed, _RNG_VOLUME)
    vol = np.zeros(shape)
    for octave, (sigma, amp) in enumerate([(6.0, 1.0), (3.0, 0.5), (1.5, 0.25)]):
        vol += amp * gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    lo, hi = vol.min(), vol.max()
    return (vol - lo) / (hi - lo)


def _render_frame(volume: np.ndarray, pose: Pose6DoF, frame_size) -> np.ndarray:
    h, w = frame_size
    xs = (np.arange(w) - (w - 1) / 2) * PIXEL_SPACING_MM
    ys = (np.arange(h) - (h - 1) / 2) * PIXEL_SPACING_MM
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=0)
    mat = pose_to_matrix(pose)
    world = mat[:3, :3] @ pts + mat[:3, 3:4]
    coords = world / VOXEL_SPACING_MM + np.array(volume.shape)[:, None] / 2.0
    vals = map_coordinates(volume, coords, order=1, mode="grid-wrap")
    return vals.reshape(h, w)


def generate(spec: SweepSpec) -> SweepSequence:
    """Render a full sweep; deterministic in the spec (including seed)."""
    rels = ground_truth_relatives(spec)
    traj = accumulate(rels)
    volume = _noise_volume(spec.seed)
    noise_rng = rng_stream(spec.seed, _RNG_NOISE)
    m_total = spec.num_frames
    frames = []
    for m, p in enumerate(traj):
        img = _render_frame(volume, p, spec.frame_size)
        gain = 1.0 + spec.brightness_amplitude * np.sin(2 * np.pi * m / m_total)
        img = img * gain
        if spec.noise_level > 0:
            img = img + spec.noise_level * noise_rng.standard_normal(img.shape)
        img = np.clip(img, 0.0, 1.0)
        frames.append(Frame(img, timestamp=m * FRAME_DT_S))
    return SweepSequence(frames, rels, spec)


# ---------------------------------------------------------------------
# perturbations

def perturb(seq: SweepSequence, kind: str, **params) -> SweepSequence:
    """Stress an existing sweep.

    speed-burst re-renders with updated ground truth; brightness and
    dropout-contact alter intensities only and never touch ground truth.
    """
    m_total = len(seq)
    if kind == "speed-burst":
        start, end = int(params["start"]), int(params["end"])
        mult = float(params.get("multiplier", 3.0))
        _check_segment(start, end, m_total)
        spec = SweepSpec(**{**asdict(seq.spec),
                            "bursts": seq.spec.bursts + [[start, end, mult]]})
        return generate(spec)
    if kind == "brightness":
        gain = float(params.get("gain", 1.0))
        start = int(params.get("start", 0))
        end = int(params.get("end", m_total - 1))
        _check_segment(start, end, m_total)
        frames = [Frame(np.clip(f.intensities * gain, 0, 1), f.timestamp)
                  if start <= m <= end else f
                  for m, f in enumerate(seq.frames)]
        return SweepSequence(frames, seq.gt_relatives, seq.spec)
    if kind == "dropout-contact":
        start, end = int(params["start"]), int(params["end"])
        atten = float(params.get("attenuation", 0.15))
        _check_segment(start, end, m_total)
        frames = [Frame(np.clip(f.intensities * atten, 0, 1), f.timestamp)
                  if start <= m <= end else f
                  for m, f in enumerate(seq.frames)]
        return SweepSequence(frames, seq.gt_relatives, seq.spec)
    raise ValueError(f"unknown perturbation kind {kind!r}")


def _check_segment(start: int, end: int, m_total: int) -> None:
    if not 0 <= start <= end < m_total:
        raise ValueError(f"segment [{start}, {end}] outside 0..{m_total - 1}")


# ---------------------------------------------------------------------
# on-disk container: frames.bin + gt.txt + spec.json

_FRAMES_MAGIC = b"ETFR"
_FRAMES_VERSION = 1


def write_sequence(directory, seq: SweepSequence) -> None:
    from pathlib import Path
    from .pose import save_trajectory
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    m = len(seq)
    h, w = seq.frames[0].intensities.shape
    with open(d / "frames.bin", "wb") as f:
        import struct
        f.write(struct.pack("<4sIIII", _FRAMES_MAGIC, _FRAMES_VERSION, m, h, w))
        f.write(np.array([fr.timestamp for fr in seq.frames], dtype="<f8").tobytes())
        for fr in seq.frames:
            f.write(np.ascontiguousarray(fr.intensities, dtype="<f8").tobytes())
    save_trajectory(d / "gt.txt", seq.gt_trajectory())
    (d / "spec.json").write_text(seq.spec.to_json())


def read_sequence(directory) -> SweepSequence:
    from pathlib import Path
    import struct
    d = Path(directory)
    spec = SweepSpec.from_json((d / "spec.json").read_text())
    with open(d / "frames.bin", "rb") as f:
        magic, version, m, h, w = struct.unpack("<4sIIII", f.read(20))
        if magic != _FRAMES_MAGIC:
            raise ValueError(f"not a frames container: bad magic {magic!r}")
        if version != _FRAMES_VERSION:
            raise ValueError(f"unsupported frames container version {version}")
        stamps = np.frombuffer(f.read(8 * m), dtype="<f8")
        frames = []
        for i in range(m):
            img = np.frombuffer(f.read(8 * h * w), dtype="<f8").reshape(h, w).copy()
            frames.append(Frame(img, float(stamps[i])))
    rels = ground_truth_relatives(spec)
    return SweepSequence(frames, rels, spec)
