"""Desk-scale training engine with sign instrumentation."""

from .config import InterventionConfig, TrackConfig, TrainConfig, expand_sweep, load_config, parse_overrides
from .data import DataConfig, Dataset, make_dataset
from .loop import RunArtifacts, schedule_for, train
from .model import ModelSpec, forward_backward, init_params, loss
from .optim import AdamW, OptimConfig, SGD, clip_global_norm
from .schedules import Schedule, lr_at, schedule_sums

__all__ = [
    "AdamW", "DataConfig", "Dataset", "InterventionConfig", "ModelSpec", "OptimConfig",
    "RunArtifacts", "SGD", "Schedule", "TrackConfig", "TrainConfig", "clip_global_norm",
    "expand_sweep", "forward_backward", "init_params", "load_config", "loss", "lr_at",
    "make_dataset", "parse_overrides", "schedule_for", "schedule_sums", "train",
]
