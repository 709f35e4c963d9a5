"""Freehand ultrasound sweep reconstruction with per-frame uncertainty."""

__version__ = "0.1.0"

from .pose import Pose6DoF, Trajectory, accumulate, compose, relative
from .sweep import SweepSpec, SweepSequence, generate, perturb
from .model import ModelConfig, PoseModel, LossWeights
from .metrics import MetricsReport, compute_metrics, aggregate
from .train import TrainConfig, Trainer, predict_trajectory
from .hitl import (Session, SessionConfig, UncertaintyReport, gate,
                   calibrate_thresholds, mc_uncertainty, PROMPT_CATALOG)

__all__ = [
    "Pose6DoF", "Trajectory", "accumulate", "compose", "relative",
    "SweepSpec", "SweepSequence", "generate", "perturb",
    "ModelConfig", "PoseModel", "LossWeights",
    "MetricsReport", "compute_metrics", "aggregate",
    "TrainConfig", "Trainer", "predict_trajectory",
    "Session", "SessionConfig", "UncertaintyReport", "gate",
    "calibrate_thresholds", "mc_uncertainty", "PROMPT_CATALOG",
]
