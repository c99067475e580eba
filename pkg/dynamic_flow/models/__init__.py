"""Backbone and iteration policy bundled as one checkpointable model."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional

from .. import seeding
from ..config import ModelConfig
from ..errors import CheckpointFormatError, ContractError
from ..flops import LayerSpec
from ..tensorcore import Module, Parameter, load_checkpoint, save_checkpoint
from .backbone import ConvGRU, Encoding, FeatureMaps, FlowBackbone, UpdateBlock
from .correlation import CorrVolume, correlation_volume, lookup_corr
from .policy import GateOutput, IterationPolicy, PolicyState, gumbel_gate, iteration_embedding

logger = logging.getLogger(__name__)


class DynamicFlowModel(Module):
    """Flow backbone plus the iteration policy that gates its update operator."""

    def __init__(self, config: Optional[ModelConfig] = None, *, seed: int = 0) -> None:
        self.config = config or ModelConfig()
        rng = seeding.stream(seed, "init")
        self.backbone = FlowBackbone(self.config, rng)
        self.policy = IterationPolicy(self.config, rng)

    def backbone_parameters(self) -> List[tuple[str, Parameter]]:
        return list(self.backbone.named_parameters(prefix="backbone."))

    def policy_parameters(self) -> List[tuple[str, Parameter]]:
        return list(self.policy.named_parameters(prefix="policy."))

    def layer_specs(self, component: str, height: int, width: int) -> List[LayerSpec]:
        """Costed layers of ``component`` for one ``height × width`` image pair."""

        if component == "encoder":
            return self.backbone.encoder_specs(height, width)
        if component == "update":
            return self.backbone.update_specs(height, width)
        if component == "policy":
            return self.policy.specs(*self.backbone.feature_grid(height, width))
        raise ContractError(f"Unknown component {component!r}")

    def save(self, path: Path | str) -> Path:
        return save_checkpoint(self.state_dict(), path)

    @classmethod
    def load(cls, path: Path | str, config: Optional[ModelConfig] = None) -> "DynamicFlowModel":
        model = cls(config)
        try:
            model.load_state_dict(load_checkpoint(path))
        except (KeyError, ValueError) as exc:
            raise CheckpointFormatError(f"{path} does not fit this model: {exc}") from exc
        logger.info("Loaded checkpoint", extra={"path": str(path)})
        return model


__all__ = [
    "ConvGRU",
    "CorrVolume",
    "DynamicFlowModel",
    "Encoding",
    "FeatureMaps",
    "FlowBackbone",
    "GateOutput",
    "IterationPolicy",
    "PolicyState",
    "UpdateBlock",
    "correlation_volume",
    "gumbel_gate",
    "iteration_embedding",
    "lookup_corr",
]
