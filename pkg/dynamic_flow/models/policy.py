"""Context-aware iteration policy.

At every step the policy looks at the aggregated features φ̂_t, its own
history cell h_{t-1} and a sinusoidal embedding of t, scales its first
convolution by the resource preference r, and emits two gate logits plus a
prediction of how much the next update will improve the flow.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from ..config import ModelConfig
from ..errors import ContractError
from ..flops import LayerSpec
from ..tensorcore import ConvLayer, Module, Tensor, concat_channels, global_avg_pool, relu, softmax

logger = logging.getLogger(__name__)

PolicyVariant = Literal["full", "no_fi", "no_context"]
NoiseSource = Union[np.random.Generator, Sequence[np.random.Generator], None]

EMBEDDING_SIZE = 6


@dataclass
class PolicyState:
    """History hidden cell h_t, ``[N,Ch,h,w]``."""

    h: Tensor

    @classmethod
    def initial(cls, batch: int, channels: int, height: int, width: int) -> "PolicyState":
        return cls(h=Tensor(np.zeros((batch, channels, height, width))))


@dataclass
class GateOutput:
    """Gate logits P (enter, skip), soft gate p and predicted improvement i."""

    P: Tensor
    p: Tensor
    i: Optional[Tensor]

    def enters(self) -> np.ndarray:
        """Hard decision per sample: enter the next update when P[0] > P[1]."""

        return self.P.data[:, 0] > self.P.data[:, 1]


def iteration_embedding(t: int, T: int, *, literal: bool = False) -> np.ndarray:
    """[sin(2^i π τ), cos(2^i π τ)] for i = 0, 1, 2 with τ = t/T (or τ = t when literal)."""

    if not 1 <= t <= T - 1:
        raise ContractError(f"iteration embedding needs 1 <= t <= T-1, got t={t}, T={T}")
    phase = float(t) if literal else t / T
    values: List[float] = []
    for i in range(3):
        angle = (2**i) * math.pi * phase
        values.extend((math.sin(angle), math.cos(angle)))
    return np.asarray(values)


def _gumbel_noise(batch: int, noise: NoiseSource) -> np.ndarray:
    tiny = np.finfo(np.float64).tiny
    if isinstance(noise, np.random.Generator):
        uniform = noise.uniform(tiny, 1.0, size=(batch, 2))
    else:
        streams = list(noise or [])
        if len(streams) != batch:
            raise ContractError(f"{batch} samples need {batch} noise streams, got {len(streams)}")
        uniform = np.stack([stream.uniform(tiny, 1.0, size=2) for stream in streams])
    return -np.log(-np.log(uniform))


def gumbel_gate(P: Tensor, tau: float, noise: bool = False, rng: NoiseSource = None) -> Tensor:
    """p = softmax((P + G) / τ)[enter] with G ~ Gumbel(0, 1), or G = 0 when noise is off.

    ``rng`` is one generator for the whole batch or one generator per sample.
    """

    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = P
    if noise:
        if rng is None:
            raise ContractError("gumbel noise needs a random generator")
        logits = P + Tensor(_gumbel_noise(P.shape[0], rng))
    return softmax(logits * (1.0 / tau), axis=1)[:, 0]


def _resource_tensor(r: Union[float, Sequence[float], np.ndarray], batch: int) -> Tensor:
    values = np.broadcast_to(np.asarray(r, dtype=np.float64), (batch,))
    if np.any(values <= 0) or np.any(values > 1):
        raise ContractError(f"resource preference r must lie in (0, 1], got {np.asarray(r)}")
    return Tensor(values.reshape(batch, 1, 1, 1))


class IterationPolicy(Module):
    """Conv_1 → ×r → ReLU → global pool → Conv_2 (P_enter, P_skip, i)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator) -> None:
        self.config = config
        channels = config.policy_channels
        self.conv1 = ConvLayer(config.feature_channels + channels + EMBEDDING_SIZE, channels, 3, rng)
        self.conv2 = ConvLayer(channels, 3, 1, rng)

    def initial_state(self, batch: int, height: int, width: int) -> PolicyState:
        return PolicyState.initial(batch, self.config.policy_channels, height, width)

    def embedding(self, t: int, T: int) -> np.ndarray:
        return iteration_embedding(t, T, literal=self.config.embedding == "literal")

    def __call__(
        self,
        phi_hat: Tensor,
        state: PolicyState,
        e: np.ndarray,
        r: Union[float, Sequence[float], np.ndarray],
        *,
        tau: Optional[float] = None,
        noise: bool = False,
        rng: NoiseSource = None,
        variant: PolicyVariant = "full",
    ) -> Tuple[PolicyState, GateOutput]:
        """h_t, p_t, i_t = Policy(φ̂_t, h_{t-1}, e_t, r)."""

        batch, _, height, width = phi_hat.shape
        if state.h.shape[2:] != (height, width):
            raise ContractError(f"policy state {state.h.shape} does not match features {phi_hat.shape}")
        scale = _resource_tensor(r, batch)

        features = phi_hat.detach() if self.config.detach_policy_input else phi_hat
        embedding = np.broadcast_to(np.asarray(e, dtype=np.float64).reshape(1, EMBEDDING_SIZE, 1, 1), (batch, EMBEDDING_SIZE, height, width))
        if variant == "no_context":
            history = Tensor(np.zeros(state.h.shape))
            embedding = np.zeros_like(embedding)
        else:
            history = state.h

        h = self.conv1(concat_channels([features, history, Tensor(embedding)])) * scale
        head = self.conv2(global_avg_pool(relu(h))).reshape(batch, 3)
        P = head[:, :2]
        p = gumbel_gate(P, self.config.tau if tau is None else tau, noise, rng)
        i = head[:, 2] if variant == "full" else None
        return PolicyState(h=h), GateOutput(P=P, p=p, i=i)

    def specs(self, height: int, width: int) -> List[LayerSpec]:
        channels = self.config.policy_channels
        elements = channels * height * width
        return [
            self.conv1.spec(height, width),
            LayerSpec(kind="elementwise", elements=elements, label="policy.scale_r"),
            LayerSpec(kind="pointwise", elements=elements, label="policy.relu"),
            LayerSpec(kind="pool", elements=elements, label="policy.pool"),
            self.conv2.spec(1, 1),
            LayerSpec(kind="gate", elements=1, per_element=6, label="policy.gate"),
        ]


__all__ = [
    "EMBEDDING_SIZE",
    "GateOutput",
    "IterationPolicy",
    "PolicyState",
    "PolicyVariant",
    "gumbel_gate",
    "iteration_embedding",
]
