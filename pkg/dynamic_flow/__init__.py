"""Dynamic optical flow: a recurrent flow backbone gated by a learned iteration policy."""
from .config import ModelConfig, RunConfig, TrainConfig, settings
from .engine import fit, infer, rollout, train_step
from .models import DynamicFlowModel

__all__ = [
    "DynamicFlowModel",
    "ModelConfig",
    "RunConfig",
    "TrainConfig",
    "fit",
    "infer",
    "rollout",
    "settings",
    "train_step",
]
