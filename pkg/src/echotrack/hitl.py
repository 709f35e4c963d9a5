"""Acquisition safety loop: uncertainty, gating, saliency, prompts.

Per incoming frame the model runs K stochastic dropout passes; the sample
variance of the predicted pose drives a three-level gate (safe / caution /
critical) with clinician-style calibrated thresholds.  Unstable frames get
a saliency map, an uncertainty heatmap, and exactly one corrective prompt;
the corrected retry re-enters the same pipeline.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, rng_stream
from .model import PoseModel
from .pose import Pose6DoF, compose
from .train import window_poses_to_relatives

_RNG_MC = 7000

GATE_SAFE = "safe"
GATE_CAUTION = "caution"
GATE_CRITICAL = "critical"

# cause -> operator message; the rescan message is side-resolved
PROMPT_CATALOG = {
    "misalignment-left": "Rescan left boundary",
    "misalignment-right": "Rescan right boundary",
    "poor-coupling": "Increase contact pressure",
    "temporal-instability": "Slow down probe",
    "critical-uncertainty": "Reacquire at same location",
}


@dataclass
class UncertaintyReport:
    frame_index: int
    mu: Pose6DoF
    sigma2: float
    passes: int
    gate: str

    def __post_init__(self):
        if self.sigma2 < 0:
            raise ValueError("variance cannot be negative")
        if self.gate not in (GATE_SAFE, GATE_CAUTION, GATE_CRITICAL):
            raise ValueError(f"unknown gate level {self.gate!r}")


@dataclass
class SaliencyMap:
    values: np.ndarray   # same dims as the frame, in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.min() < 0 or v.max() > 1:
            raise ValueError("saliency values must lie in [0, 1]")
        self.values = v


@dataclass
class OperatorPrompt:
    cause: str
    message: str
    frame_index: int

    def __post_init__(self):
        if self.message not in PROMPT_CATALOG.values():
            raise ValueError(f"message not in the prompt catalog: {self.message!r}")


# ---------------------------------------------------------------------
# gate + calibration

def gate(sigma2: float, tau1: float, tau2: float) -> str:
    """safe below tau1, caution in [tau1, tau2), critical at or above tau2."""
    if not 0 < tau1 < tau2:
        raise ValueError(f"need 0 < tau1 < tau2, got {tau1}, {tau2}")
    if sigma2 < tau1:
        return GATE_SAFE
    if sigma2 < tau2:
        return GATE_CAUTION
    return GATE_CRITICAL


def calibrate_thresholds(sigma2_values, safe_quantile: float = 0.80,
                         critical_quantile: float = 0.95) -> tuple[float, float]:
    """Empirical quantiles of clean-sweep variances."""
    vals = np.asarray(list(sigma2_values), dtype=float)
    if vals.size == 0:
        raise ValueError("no validation variances to calibrate on")
    if not (0 < safe_quantile < critical_quantile < 1):
        raise ValueError("quantiles must satisfy 0 < safe < critical < 1")
    tau1 = float(np.quantile(vals, safe_quantile))
    tau2 = float(np.quantile(vals, critical_quantile))
    if not tau1 < tau2:
        raise ValueError("degenerate variance distribution: tau1 == tau2; "
                         "widen the quantiles or the validation set")
    if tau1 <= 0:
        raise ValueError("safe threshold must be positive")
    return tau1, tau2


# ---------------------------------------------------------------------
# MC-dropout uncertainty

def mc_dropout_poses(model: PoseModel, frames, k: int, dropout_rate: float,
                     seed: int, flow_raw=None) -> np.ndarray:
    """K stochastic window predictions, shape (K, T, 6); seed-deterministic."""
    if k < 2:
        raise ValueError("MC dropout needs K >= 2 passes")
    samples = []
    for i in range(k):
        rng = rng_stream(seed, _RNG_MC + i)
        pred = model.forward(frames, dropout_rate=dropout_rate, rng=rng,
                             flow_raw=flow_raw)
        samples.append(pred.data)
    return np.stack(samples)


def mc_uncertainty(model: PoseModel, frames, k: int = 16,
                   dropout_rate: float = 0.1, seed: int = 0,
                   tau1: float | None = None, tau2: float | None = None,
                   frame_index: int = 0, flow_raw=None
                   ) -> tuple[UncertaintyReport, np.ndarray]:
    """Report for the window's last frame plus the mean window poses.

    sigma2 is the mean squared distance of the K pose samples to their mean
    (rotations enter at 1 mm per degree).
    """
    samples = mc_dropout_poses(model, frames, k, dropout_rate, seed, flow_raw)
    mean = samples.mean(axis=0)            # (T, 6)
    last = samples[:, -1, :]
    sigma2 = float(np.mean(np.sum((last - mean[-1]) ** 2, axis=1)))
    level = GATE_SAFE if tau1 is None else gate(sigma2, tau1, tau2)
    report = UncertaintyReport(frame_index=frame_index,
                               mu=Pose6DoF.from_vector(mean[-1]),
                               sigma2=sigma2, passes=k, gate=level)
    return report, mean


# ---------------------------------------------------------------------
# saliency + uncertainty heatmap

def saliency(model: PoseModel, frames, flow_raw=None) -> SaliencyMap:
    """|d ||pose||^2 / d pixel| of the last frame, max-normalized."""
    images = [f.intensities if hasattr(f, "intensities") else np.asarray(f)
              for f in frames]
    tensors = [Tensor(img) for img in images[:-1]]
    target = Tensor(images[-1], requires_grad=True)
    tensors.append(target)
    if flow_raw is None:
        flow_raw = model.raw_flow_features(images)
    pred = model.forward(tensors, flow_raw=flow_raw)
    root = pred[-1].squared_norm()
    root.backward()
    sal = np.abs(target.grad)
    peak = sal.max()
    if peak > 0:
        sal = sal / peak
    return SaliencyMap(sal)


def uncertainty_heatmap(model: PoseModel, frames, k: int = 8,
                        dropout_rate: float = 0.1, seed: int = 0,
                        flow_raw=None) -> np.ndarray:
    """Spatial variance of patch-token magnitudes across MC passes,
    upsampled to frame dims and max-normalized."""
    images = [f.intensities if hasattr(f, "intensities") else np.asarray(f)
              for f in frames]
    maps = []
    for i in range(max(k, 2)):
        rng = rng_stream(seed, _RNG_MC + 500 + i)
        model.forward(images, dropout_rate=dropout_rate, rng=rng,
                      flow_raw=flow_raw)
        tokens = model._last_patch_tokens.data[-1]       # (gr, gc, d)
        maps.append(np.linalg.norm(tokens, axis=-1))
    var = np.var(np.stack(maps), axis=0)
    h, w = images[-1].shape
    up = np.kron(var, np.ones((h // var.shape[0], w // var.shape[1])))
    peak = up.max()
    return up / peak if peak > 0 else up


# ---------------------------------------------------------------------
# prompts

def saliency_laterality(sal: SaliencyMap) -> float:
    """Fraction of saliency mass in the heavier image half (0.5 .. 1)."""
    total = float(sal.values.sum())
    if total <= 0:
        return 0.5
    w = sal.values.shape[1]
    left = float(sal.values[:, : w // 2].sum()) / total
    return max(left, 1.0 - left)


def generate_prompt(report: UncertaintyReport, diagnostics: dict) -> OperatorPrompt:
    """Exactly one corrective prompt per caution/critical event.

    Precedence for caution: poor coupling, then excess velocity, then
    lateralized saliency; anything else falls back to slowing the probe.
    """
    if report.gate == GATE_SAFE:
        raise ValueError("no prompt for a safe frame")
    if report.gate == GATE_CRITICAL:
        cause = "critical-uncertainty"
        return OperatorPrompt(cause, PROMPT_CATALOG[cause], report.frame_index)
    mean_int = diagnostics.get("mean_intensity")
    run_int = diagnostics.get("running_mean_intensity")
    if mean_int is not None and run_int and mean_int < 0.5 * run_int:
        cause = "poor-coupling"
        return OperatorPrompt(cause, PROMPT_CATALOG[cause], report.frame_index)
    vel = diagnostics.get("velocity")
    run_vel = diagnostics.get("running_median_velocity")
    if vel is not None and run_vel and vel > 2.0 * run_vel:
        cause = "temporal-instability"
        return OperatorPrompt(cause, PROMPT_CATALOG[cause], report.frame_index)
    sal = diagnostics.get("saliency")
    if sal is not None and saliency_laterality(sal) > 0.7:
        w = sal.values.shape[1]
        left = sal.values[:, : w // 2].sum() >= sal.values[:, w // 2:].sum()
        cause = "misalignment-left" if left else "misalignment-right"
        return OperatorPrompt(cause, PROMPT_CATALOG[cause], report.frame_index)
    cause = "temporal-instability"
    return OperatorPrompt(cause, PROMPT_CATALOG[cause], report.frame_index)


# ---------------------------------------------------------------------
# session state machine

MODE_LIVE = "live"
MODE_AWAITING = "awaiting-correction"


@dataclass
class SessionConfig:
    tau1: float
    tau2: float
    window: int = 5
    k_passes: int = 16
    dropout_rate: float = 0.1
    seed: int = 0
    frame_size: tuple = (64, 64)
    compute_saliency: bool = True

    def __post_init__(self):
        if not 0 < self.tau1 < self.tau2:
            raise ValueError("thresholds must satisfy 0 < tau1 < tau2")


@dataclass
class StepOutput:
    report: UncertaintyReport
    pose: Pose6DoF | None            # newly appended absolute pose, if accepted
    prompt: OperatorPrompt | None
    saliency: SaliencyMap | None
    mode: str


class Session:
    """Serialized per-probe safety loop with a bounded frame ring buffer."""

    def __init__(self, model: PoseModel, config: SessionConfig):
        self.model = model
        self.config = config
        self.mode = MODE_LIVE
        self.buffer: deque = deque(maxlen=config.window)
        self.trajectory: list[Pose6DoF] = [Pose6DoF.identity()]
        self.reports: list[UncertaintyReport] = []
        self._intensities: list[float] = []
        self._velocities: list[float] = []
        self._step = 0

    def step(self, frame: np.ndarray) -> StepOutput:
        cfg = self.config
        frame = np.asarray(frame, dtype=np.float64)
        if tuple(frame.shape) != tuple(cfg.frame_size):
            raise ValueError(f"frame dims {frame.shape} do not match session "
                             f"config {cfg.frame_size}")
        idx = self._step
        self._step += 1
        window = list(self.buffer) + [frame]
        if len(window) == 1:
            # first frame anchors the trajectory: trivially safe
            self.buffer.append(frame)
            self._intensities.append(float(frame.mean()))
            report = UncertaintyReport(idx, Pose6DoF.identity(), 0.0,
                                       cfg.k_passes, GATE_SAFE)
            self.reports.append(report)
            return StepOutput(report, self.trajectory[0], None, None, self.mode)

        report, mean_poses = mc_uncertainty(
            self.model, window, k=cfg.k_passes, dropout_rate=cfg.dropout_rate,
            seed=cfg.seed + idx, tau1=cfg.tau1, tau2=cfg.tau2, frame_index=idx)
        self.reports.append(report)
        rel = window_poses_to_relatives(mean_poses)[-1]
        speed = float(np.linalg.norm(rel.to_vector()[:3]))

        if report.gate == GATE_SAFE:
            self.buffer.append(frame)
            new_pose = compose(self.trajectory[-1], rel)
            self.trajectory.append(new_pose)
            self._intensities.append(float(frame.mean()))
            self._velocities.append(speed)
            self.mode = MODE_LIVE
            return StepOutput(report, new_pose, None, None, self.mode)

        sal = saliency(self.model, window) if cfg.compute_saliency else None
        diagnostics = {
            "mean_intensity": float(frame.mean()),
            "running_mean_intensity": float(np.mean(self._intensities))
            if self._intensities else None,
            "velocity": speed,
            "running_median_velocity": float(np.median(self._velocities))
            if self._velocities else None,
            "saliency": sal,
        }
        prompt = generate_prompt(report, diagnostics)
        self.mode = MODE_AWAITING   # rejected frame is not appended
        return StepOutput(report, None, prompt, sal, self.mode)
