"""Gradient-descent optimizers: plain, heavy-ball momentum and Adam."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractError, NonFiniteError
from .nn import Parameter

logger = logging.getLogger(__name__)

OptimizerMode = Literal["plain", "momentum", "adam"]


@dataclass
class AdamState:
    """First and second moment estimates per parameter name, plus the step count."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: Sequence[Tuple[str, Parameter]],
    grads: Sequence[np.ndarray],
    lr: float,
    mode: OptimizerMode = "plain",
    *,
    momentum: float = 0.9,
    velocity: Optional[Dict[str, np.ndarray]] = None,
    adam: Optional[AdamState] = None,
) -> None:
    """Apply one update in place.

    plain:    p ← p − lr·g
    momentum: v ← μ·v + g;  p ← p − lr·v
    adam:     m ← β1·m + (1−β1)·g;  s ← β2·s + (1−β2)·g²;
              p ← p − lr·m̂ / (√ŝ + ε) with bias-corrected m̂, ŝ

    Every gradient is checked before any parameter moves, so a rejected step
    leaves all parameters untouched.
    """

    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for (name, _), grad in zip(params, grads):
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(f"Non-finite gradient for parameter {name}", parameter=name)

    if mode == "plain":
        for (_, param), grad in zip(params, grads):
            param.data = param.data - lr * grad
    elif mode == "momentum":
        if velocity is None:
            raise ContractError("momentum mode needs a velocity buffer")
        for (name, param), grad in zip(params, grads):
            buffer = velocity.get(name)
            buffer = grad.copy() if buffer is None else momentum * buffer + grad
            velocity[name] = buffer
            param.data = param.data - lr * buffer
    elif mode == "adam":
        if adam is None:
            raise ContractError("adam mode needs an AdamState")
        adam.steps += 1
        correction1 = 1.0 - adam.beta1**adam.steps
        correction2 = 1.0 - adam.beta2**adam.steps
        for (name, param), grad in zip(params, grads):
            first = adam.beta1 * adam.first.get(name, 0.0) + (1.0 - adam.beta1) * grad
            second = adam.beta2 * adam.second.get(name, 0.0) + (1.0 - adam.beta2) * grad * grad
            adam.first[name] = first
            adam.second[name] = second
            param.data = param.data - lr * (first / correction1) / (np.sqrt(second / correction2) + adam.eps)
    else:
        raise ContractError(f"Unknown optimizer mode {mode!r}")


class Optimizer:
    """Stateful wrapper around :func:`optimizer_step` for a fixed parameter list."""

    def __init__(
        self,
        params: Sequence[Tuple[str, Parameter]],
        lr: float,
        *,
        mode: OptimizerMode = "momentum",
        momentum: float = 0.9,
        clip_norm: Optional[float] = None,
    ) -> None:
        self.params: List[Tuple[str, Parameter]] = list(params)
        self.lr = lr
        self.mode = mode
        self.momentum = momentum
        self.clip_norm = clip_norm
        self.velocity: Dict[str, np.ndarray] = {}
        self.adam = AdamState()

    def zero_grad(self) -> None:
        for _, param in self.params:
            param.grad = None

    def gradients(self) -> List[np.ndarray]:
        return [param.grad if param.grad is not None else np.zeros_like(param.data) for _, param in self.params]

    def step(self) -> float:
        """Update the parameters and return the pre-clipping global gradient norm."""

        grads = self.gradients()
        norm = math.sqrt(sum(float(np.sum(grad * grad)) for grad in grads))
        if self.clip_norm is not None and math.isfinite(norm) and norm > self.clip_norm:
            scale = self.clip_norm / norm
            grads = [grad * scale for grad in grads]
            logger.debug("Clipped gradients", extra={"norm": norm, "clip_norm": self.clip_norm})
        optimizer_step(
            self.params,
            grads,
            self.lr,
            self.mode,
            momentum=self.momentum,
            velocity=self.velocity,
            adam=self.adam,
        )
        return norm


__all__ = ["AdamState", "Optimizer", "OptimizerMode", "optimizer_step"]
