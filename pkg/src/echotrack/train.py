"""Curriculum training of the pose model plus full-sequence inference.

Stages train on progressively longer frame windows (3 through 7) so the
recurrent blocks converge before seeing long-range context.  Everything is
deterministic in (config, seed): window sampling and dropout draw from
counter-based streams keyed by the epoch, so a run resumed from a
checkpoint continues bit-identically.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import AdamW, LrSchedule, Tensor, rng_stream, save_checkpoint, load_checkpoint
from .model import LossWeights, ModelConfig, PoseModel, window_loss
from .metrics import compute_metrics
from .pose import Pose6DoF, Trajectory, accumulate, compose, relative
from .sweep import SweepSequence

_RNG_WINDOWS = 100      # + epoch index
_RNG_DROPOUT = 5000     # + epoch index

DEFAULT_STAGES = (3, 4, 5, 6, 7)


@dataclass
class TrainConfig:
    seed: int = 0
    stages: tuple = DEFAULT_STAGES
    epochs_per_stage: int = 2
    windows_per_sequence: int = 6
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    dropout_rate: float = 0.05
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_window: int = 7
    uncertainty_weighting: bool = False
    uncertainty_passes: int = 4

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.stages = tuple(int(s) for s in self.stages)
        if not self.stages or any(s < 2 for s in self.stages):
            raise ValueError("curriculum stages must be window lengths >= 2")

    def to_json(self) -> str:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        raw = json.loads(text)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training-config keys: {sorted(unknown)}")
        return cls(**raw)


def gt_window_poses(traj: Trajectory, start: int, length: int) -> np.ndarray:
    """Ground-truth poses re-anchored to the window's first frame, (L, 6)."""
    ref = traj[start]
    return np.stack([relative(ref, traj[start + i]).to_vector()
                     for i in range(length)])


def total_epochs(config: TrainConfig) -> int:
    return len(config.stages) * config.epochs_per_stage


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    window: int
    point: float
    velocity: float
    corr: float
    mse: float
    total: float
    val_de: float
    lr: float


class Trainer:
    """Owns the model, optimizer, and per-sequence caches for one run."""

    def __init__(self, config: TrainConfig, dataset: list[SweepSequence],
                 val_dataset: list[SweepSequence] | None = None):
        if not dataset:
            raise ValueError("training dataset is empty")
        shortest = min(len(s) for s in dataset)
        if max(config.stages) > shortest:
            raise ValueError(f"curriculum window {max(config.stages)} longer than "
                             f"shortest sequence ({shortest} frames)")
        self.config = config
        self.dataset = dataset
        self.val_dataset = val_dataset or []
        self.model = PoseModel(config.model, seed=config.seed)
        steps = (total_epochs(config) * len(dataset) * config.windows_per_sequence)
        self.optimizer = AdamW(
            self.model.parameters(),
            schedule=LrSchedule(kind=config.lr_schedule, base_lr=config.lr,
                                warmup_steps=min(20, steps // 10),
                                total_steps=max(steps, 1)),
            weight_decay=config.weight_decay, clip_norm=config.clip_norm)
        self.history: list[EpochRecord] = []
        self.epoch = 0
        # flow features are parameter-free: compute once per sequence
        self._flow = [self.model.raw_flow_features(
            [f.intensities for f in s.frames]) for s in dataset]
        self._gt = [s.gt_trajectory() for s in dataset]

    # -- persistence ---------------------------------------------------

    def save_state(self, path) -> None:
        blobs = dict(self.model.parameters())
        for k, m in self.optimizer.m.items():
            blobs[f"opt.m.{k}"] = m
        for k, v in self.optimizer.v.items():
            blobs[f"opt.v.{k}"] = v
        blobs["opt.step"] = np.array([float(self.optimizer.step_count)])
        blobs["trainer.epoch"] = np.array([float(self.epoch)])
        save_checkpoint(path, blobs)

    def load_state(self, path) -> None:
        raw = load_checkpoint(path)
        for k, p in self.model.parameters().items():
            p.data = raw[k]
        for k in self.optimizer.m:
            self.optimizer.m[k] = raw[f"opt.m.{k}"]
            self.optimizer.v[k] = raw[f"opt.v.{k}"]
        self.optimizer.step_count = int(raw["opt.step"][0])
        self.epoch = int(raw["trainer.epoch"][0])

    # -- training ------------------------------------------------------

    def _window_weight(self, seq_idx: int, start: int, length: int,
                      rng: np.random.Generator) -> float:
        """Down-weight windows the model is uncertain about (1 / (1 + var))."""
        cfg = self.config
        seq = self.dataset[seq_idx]
        frames = [f.intensities for f in seq.frames[start:start + length]]
        flow = self._flow[seq_idx][start:start + length].copy()
        flow[0] = 0.0
        samples = []
        for _ in range(cfg.uncertainty_passes):
            pred = self.model.forward(frames, dropout_rate=max(cfg.dropout_rate, 0.1),
                                      rng=rng, flow_raw=flow)
            samples.append(pred.data[-1])
        var = float(np.mean(np.sum((np.stack(samples)
                                    - np.mean(samples, axis=0)) ** 2, axis=1)))
        return 1.0 / (1.0 + var)

    def run_epoch(self) -> EpochRecord:
        cfg = self.config
        stage_idx = min(self.epoch // cfg.epochs_per_stage, len(cfg.stages) - 1)
        length = cfg.stages[stage_idx]
        win_rng = rng_stream(cfg.seed, _RNG_WINDOWS + self.epoch)
        drop_rng = rng_stream(cfg.seed, _RNG_DROPOUT + self.epoch)
        sums = {"point": 0.0, "velocity": 0.0, "corr": 0.0, "mse": 0.0, "total": 0.0}
        count = 0
        lr = 0.0
        for si, seq in enumerate(self.dataset):
            m_total = len(seq)
            for _ in range(cfg.windows_per_sequence):
                start = int(win_rng.integers(0, m_total - length + 1))
                frames = [f.intensities for f in seq.frames[start:start + length]]
                gt = gt_window_poses(self._gt[si], start, length)
                flow = self._flow[si][start:start + length].copy()
                flow[0] = 0.0   # window start has no predecessor
                loss, terms = window_loss(
                    self.model, frames, gt, seq.plane_extent, cfg.weights,
                    dropout_rate=cfg.dropout_rate, rng=drop_rng, flow_raw=flow)
                if cfg.uncertainty_weighting:
                    loss = loss * self._window_weight(si, start, length, drop_rng)
                self.optimizer.zero_grad()
                loss.backward()
                lr = self.optimizer.step()
                self.model.project_spectral()
                for k in sums:
                    sums[k] += terms[k]
                count += 1
        val_de = self.validation_de()
        rec = EpochRecord(epoch=self.epoch, stage=stage_idx, window=length,
                          **{k: sums[k] / count for k in sums},
                          val_de=val_de, lr=lr)
        self.history.append(rec)
        self.epoch += 1
        return rec

    def train(self, progress=None) -> list[EpochRecord]:
        for _ in range(total_epochs(self.config) - self.epoch):
            rec = self.run_epoch()
            if not np.isfinite(rec.total):
                raise FloatingPointError(f"non-finite loss at epoch {rec.epoch}")
            if progress:
                progress(rec)
        return self.history

    # -- evaluation ----------------------------------------------------

    def validation_de(self) -> float:
        if not self.val_dataset:
            return float("nan")
        des = []
        for seq in self.val_dataset:
            pred = predict_trajectory(self.model, seq,
                                      window=self.config.eval_window)
            rep = compute_metrics(pred, seq.gt_trajectory(), seq.plane_extent)
            des.append(rep.de)
        return float(np.mean(des))


def write_history_csv(path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "stage", "window", "point", "velocity",
                        "corr", "mse", "total", "val_de", "lr"])
        for r in history:
            writer.writerow([r.epoch, r.stage, r.window,
                             f"{r.point:.9f}", f"{r.velocity:.9f}",
                             f"{r.corr:.9f}", f"{r.mse:.9f}", f"{r.total:.9f}",
                             f"{r.val_de:.9f}", f"{r.lr:.9g}"])


# ---------------------------------------------------------------------
# full-sequence inference

def window_poses_to_relatives(window_pred: np.ndarray) -> list[Pose6DoF]:
    """Per-step relative transforms from reference-anchored window poses."""
    poses = [Pose6DoF.from_vector(v) for v in window_pred]
    return [relative(a, b) for a, b in zip(poses[:-1], poses[1:])]


def predict_trajectory(model: PoseModel, seq: SweepSequence, window: int = 7,
                       flow_raw: np.ndarray | None = None,
                       group_onehot: np.ndarray | None = None) -> Trajectory:
    """Slide windows over the sweep and stitch their relative motions.

    Windows overlap by one frame (stride window - 1) so each consecutive
    frame pair is predicted exactly once.
    """
    m_total = len(seq)
    window = max(2, min(window, m_total))
    images = [f.intensities for f in seq.frames]
    if flow_raw is None:
        flow_raw = model.raw_flow_features(images)
    rels: list[Pose6DoF] = []
    start = 0
    while len(rels) < m_total - 1:
        length = min(window, m_total - start)
        if length < 2:
            break
        flow = flow_raw[start:start + length].copy()
        flow[0] = 0.0
        groups = None if group_onehot is None else group_onehot[start:start + length]
        pred = model.forward(images[start:start + length], flow_raw=flow,
                             group_onehot=groups)
        rels.extend(window_poses_to_relatives(pred.data))
        start += length - 1
    return accumulate(rels[:m_total - 1])
