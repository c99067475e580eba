"""Configuration helpers for the dynamic flow engine."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

load_dotenv()

Variant = Literal["full", "l1", "B", "P", "exit"]
Phase = Literal["two_phase", "backbone", "policy", "joint"]
InferMode = Literal["policy", "exit", "fixed"]


class ConfigurationError(ValueError):
    """Raised when a run configuration is missing values or violates a constraint."""


@dataclass(slots=True)
class Settings:
    """Process-wide defaults loaded from environment variables."""

    output_dir: Optional[str] = os.getenv("DYNFLOW_OUTPUT_DIR")
    log_level: str = os.getenv("DYNFLOW_LOG_LEVEL", "INFO")
    workers: int = int(os.getenv("DYNFLOW_WORKERS", "1"))

    def resolve_output_dir(self, requested: Optional[str | Path]) -> Path:
        """Return the output directory, letting the environment override the request."""

        chosen = self.output_dir or requested
        if not chosen:
            raise ConfigurationError(
                "An output directory is required. Pass --out-dir or set DYNFLOW_OUTPUT_DIR."
            )
        return Path(chosen)


settings = Settings()


class ModelConfig(BaseModel):
    """Dimensions of the miniature backbone and the iteration policy."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    image_channels: int = Field(default=1, ge=1, description="Channels per input image (Ci).")
    downscale: int = Field(default=2, ge=1, description="Encoder stride s between image and feature grid.")
    encoder_channels: int = Field(default=16, ge=1, description="Width of the first encoder convolution.")
    feature_channels: int = Field(default=32, ge=1, description="Feature / hidden channels Cf.")
    corr_radius: int = Field(default=3, ge=0, description="Lookup window radius r.")
    corr_channels: Tuple[int, int] = Field(default=(96, 64), description="Motion encoder widths for the lookup branch.")
    flow_channels: Tuple[int, int] = Field(default=(32, 16), description="Motion encoder widths for the flow branch.")
    motion_channels: int = Field(default=48, ge=3, description="Motion feature channels fed to the GRU.")
    head_channels: int = Field(default=64, ge=1, description="Hidden width of the flow head.")
    policy_channels: int = Field(default=16, ge=1, description="Policy Conv_1 output channels Ch.")
    tau: float = Field(default=1.0, gt=0, description="Gumbel-softmax temperature.")
    embedding: Literal["normalized", "literal"] = Field(
        default="normalized", description="Phase t/T ('normalized') or raw integer t ('literal')."
    )
    detach_policy_input: bool = Field(
        default=True, description="Feed the policy a stop-gradient copy of the aggregated features."
    )


class TrainConfig(BaseModel):
    """Hyper-parameters for one training run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    t_train: int = Field(default=8, ge=2, description="Update iterations per training rollout (T).")
    t_test: int = Field(default=12, ge=2, description="Update iterations at inference.")
    r_range: Tuple[float, float] = Field(default=(0.2, 1.0), description="Sampling range of r.")
    lr: float = Field(default=2e-3, gt=0)
    optimizer: Literal["plain", "momentum", "adam"] = "adam"
    momentum: float = Field(default=0.9, ge=0, lt=1)
    clip_norm: Optional[float] = Field(default=1.0, gt=0)
    steps: int = Field(default=200, ge=1)
    backbone_steps: Optional[int] = Field(default=None, ge=1, description="Pretraining steps of a two-phase run.")
    batch_size: int = Field(default=4, ge=1)
    seed: int = Field(default=0, ge=0)
    variant: Variant = "full"
    phase: Phase = "two_phase"
    lambda_res: float = Field(default=50.0, ge=0)
    lambda_incre: float = Field(default=1.0, ge=0)
    per_sample_r: bool = False
    noise: bool = True
    checkpoint_every: int = Field(default=50, ge=1)

    @model_validator(mode="after")
    def _check_ranges(self) -> "TrainConfig":
        low, high = self.r_range
        if not (0 < low <= high <= 1):
            raise ValueError(f"r_range must lie within (0, 1] with low <= high, got {self.r_range}")
        return self

    @property
    def freeze_backbone(self) -> bool:
        return self.phase == "policy"

    @property
    def force_open(self) -> bool:
        return self.phase == "backbone"

    @property
    def resource_kind(self) -> Literal["hinge", "l1"]:
        return "l1" if self.variant == "l1" else "hinge"

    @property
    def policy_variant(self) -> Literal["full", "no_fi", "no_context"]:
        if self.variant == "B":
            return "no_context"
        if self.variant == "P":
            return "no_fi"
        return "full"

    @property
    def effective_lambda_incre(self) -> float:
        """The -B and -P ablations train without the incremental loss."""

        return 0.0 if self.variant in ("B", "P") else self.lambda_incre


class RunConfig(BaseModel):
    """Flat, command-level configuration shared by every CLI command."""

    model_config = ConfigDict(extra="forbid")

    command: str = ""
    dataset: Optional[str] = None
    eval_dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    init: Optional[str] = None
    out: Optional[str] = None
    out_dir: Optional[str] = None
    n: int = Field(default=256, ge=0)
    seed: int = Field(default=0, ge=0)
    height: int = Field(default=32, ge=8)
    width: int = Field(default=64, ge=8)
    hard_fraction: float = Field(default=0.5, ge=0, le=1)
    r: float = Field(default=0.5, gt=0, le=1)
    r_list: List[float] = Field(default_factory=lambda: [0.2, 0.4, 0.6, 0.8, 1.0])
    mode: InferMode = "policy"
    t_fixed: Optional[int] = Field(default=None, ge=1)
    tol: float = Field(default=0.01, gt=0)
    variant: Variant = "full"
    phase: Phase = "two_phase"
    steps: int = Field(default=200, ge=1)
    backbone_steps: Optional[int] = Field(default=None, ge=1)
    t_train: int = Field(default=8, ge=2)
    t_test: int = Field(default=12, ge=2)
    batch_size: int = Field(default=4, ge=1)
    lr: float = Field(default=2e-3, gt=0)
    optimizer: Literal["plain", "momentum", "adam"] = "adam"
    embedding: Literal["normalized", "literal"] = "normalized"
    detach_policy_input: bool = True
    workers: int = Field(default_factory=lambda: settings.workers, ge=1)

    @field_validator("r_list", mode="before")
    @classmethod
    def _split_r_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            return [float(item) for item in value.split(",") if item.strip()]
        return value

    @field_validator("r_list")
    @classmethod
    def _check_r_list(cls, value: List[float]) -> List[float]:
        for item in value:
            if not 0 < item <= 1:
                raise ValueError(f"r values must lie in (0, 1], got {item}")
        return value

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            t_train=self.t_train,
            t_test=self.t_test,
            lr=self.lr,
            optimizer=self.optimizer,
            steps=self.steps,
            backbone_steps=self.backbone_steps,
            batch_size=self.batch_size,
            seed=self.seed,
            variant=self.variant,
            phase=self.phase,
        )

    def build_model_config(self, image_channels: int) -> ModelConfig:
        return ModelConfig(
            image_channels=image_channels,
            embedding=self.embedding,
            detach_policy_input=self.detach_policy_input,
        )


def load_run_config(path: Optional[str | Path], overrides: Mapping[str, Any]) -> RunConfig:
    """Merge a flat KEY=VALUE config file with command-line overrides."""

    values: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigurationError(f"Config file not found at {config_path}")
        for key, value in dotenv_values(config_path).items():
            if value is not None:
                values[key.lower()] = value
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    try:
        return RunConfig.model_validate(values)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc


def _format_value(value: Any) -> str:
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(item) for item in value)
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_run_config(config: RunConfig, path: str | Path) -> Path:
    """Write the fully resolved configuration next to a command's outputs."""

    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"{key.upper()}={_format_value(value)}"
        for key, value in sorted(config.model_dump().items())
        if value is not None
    ]
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return target


__all__ = [
    "ConfigurationError",
    "InferMode",
    "ModelConfig",
    "Phase",
    "RunConfig",
    "Settings",
    "TrainConfig",
    "Variant",
    "load_run_config",
    "settings",
    "write_run_config",
]
