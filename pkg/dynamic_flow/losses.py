"""Training objectives: sequence flow loss, resource preference loss, incremental loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, EmptyMaskError
from .tensorcore import Tensor, relu

logger = logging.getLogger(__name__)

FLOW_GAMMA = 0.8
LAMBDA_RES = 50.0
LAMBDA_INCRE = 1.0

ResourceKind = Literal["hinge", "l1"]
ScalarLike = Union[Tensor, float]


def _pixel_weights(valid: np.ndarray, batch: int) -> np.ndarray:
    """Weights turning a masked sum over ``[N,2,h,w]`` into per-sample means."""

    mask = np.asarray(valid, dtype=bool)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (batch, *mask.shape))
    counts = mask.reshape(mask.shape[0], -1).sum(axis=1)
    if np.any(counts == 0):
        empty = [int(index) for index in np.flatnonzero(counts == 0)]
        raise EmptyMaskError(f"No valid pixels to supervise for samples {empty}")
    weights = mask / (2.0 * counts[:, None, None])
    return np.repeat(weights[:, None], 2, axis=1)


def masked_l1(f_gt: np.ndarray, flow: Tensor, valid: np.ndarray) -> Tensor:
    """Per-sample mean absolute flow error over valid pixels and both channels, ``[N]``."""

    target = np.asarray(f_gt, dtype=np.float64)
    if target.shape != flow.shape:
        raise ContractError(f"ground truth {target.shape} does not match prediction {flow.shape}")
    weights = _pixel_weights(valid, flow.shape[0])
    return ((flow - Tensor(target)).abs() * Tensor(weights)).sum(axis=(1, 2, 3))


def flow_loss(
    f_gt: np.ndarray,
    predictions: Sequence[Tensor],
    valid: np.ndarray,
    *,
    gamma: float = FLOW_GAMMA,
) -> Tensor:
    """Σ_t γ^(T−t) · mean_valid |f_gt − f̂_t|, averaged over the batch."""

    if not predictions:
        raise ContractError("flow_loss needs at least one prediction")
    weights = _pixel_weights(valid, predictions[0].shape[0])
    target = Tensor(np.asarray(f_gt, dtype=np.float64))
    count = len(predictions)
    total: Optional[Tensor] = None
    for t, flow in enumerate(predictions, start=1):
        per_sample = ((flow - target).abs() * Tensor(weights)).sum(axis=(1, 2, 3))
        term = per_sample.mean() * (gamma ** (count - t))
        total = term if total is None else total + term
    return total


def resource_loss(gates: Sequence[Tensor], r: Union[float, np.ndarray], kind: ResourceKind = "hinge") -> Tensor:
    """Penalty on mean gate activity above r (hinge) or away from r (l1), averaged over the batch.

    ``gates`` holds p_1 .. p_{T−1}, each of shape ``[N]``.
    """

    if not gates:
        raise ContractError("resource_loss needs at least one gate (T >= 2)")
    activity = gates[0]
    for gate in gates[1:]:
        activity = activity + gate
    activity = activity * (1.0 / len(gates))
    excess = activity - Tensor(np.broadcast_to(np.asarray(r, dtype=np.float64), activity.shape))
    if kind == "hinge":
        return relu(excess).mean()
    if kind == "l1":
        return excess.abs().mean()
    raise ContractError(f"Unknown resource loss kind {kind!r}")


def incremental_loss(
    f_gt: np.ndarray,
    f_hat: Sequence[Tensor],
    f_next: Sequence[Tensor],
    improvements: Sequence[Tensor],
    valid: np.ndarray,
) -> Tensor:
    """Σ_t mean_batch |(err(f̂_t) − err(f_{t+1})) − i_t| with detached error targets."""

    if not (len(f_hat) == len(f_next) == len(improvements)):
        raise ContractError(
            f"incremental_loss needs equal-length sequences, got {len(f_hat)}, {len(f_next)}, {len(improvements)}"
        )
    if not improvements:
        raise ContractError("incremental_loss needs at least one step")
    total: Optional[Tensor] = None
    for before, after, predicted in zip(f_hat, f_next, improvements):
        gain = masked_l1(f_gt, before.detach(), valid).data - masked_l1(f_gt, after.detach(), valid).data
        term = (Tensor(gain) - predicted).abs().mean()
        total = term if total is None else total + term
    return total


@dataclass
class LossBreakdown:
    """Scalar values of every term; ``graph`` is the differentiable total."""

    flow: float
    resource: float
    incremental: float
    overall: float
    lambda_res: float = LAMBDA_RES
    lambda_incre: float = LAMBDA_INCRE
    graph: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> dict:
        return {
            "flow": self.flow,
            "resource": self.resource,
            "incremental": self.incremental,
            "overall": self.overall,
        }


def _value(term: Optional[ScalarLike]) -> float:
    if term is None:
        return 0.0
    return term.item() if isinstance(term, Tensor) else float(term)


def overall_loss(
    flow: ScalarLike,
    resource: Optional[ScalarLike] = None,
    incremental: Optional[ScalarLike] = None,
    *,
    lambda_res: float = LAMBDA_RES,
    lambda_incre: float = LAMBDA_INCRE,
) -> LossBreakdown:
    """L = L_flow + λ_res·L_res + λ_incre·L_incre.

    A zero weight drops its term from the graph entirely.
    """

    total: ScalarLike = flow
    if resource is not None and lambda_res != 0:
        total = total + resource * lambda_res
    if incremental is not None and lambda_incre != 0:
        total = total + incremental * lambda_incre
    return LossBreakdown(
        flow=_value(flow),
        resource=_value(resource),
        incremental=_value(incremental),
        overall=_value(total),
        lambda_res=lambda_res,
        lambda_incre=lambda_incre,
        graph=total if isinstance(total, Tensor) else None,
    )


__all__ = [
    "FLOW_GAMMA",
    "LAMBDA_INCRE",
    "LAMBDA_RES",
    "LossBreakdown",
    "ResourceKind",
    "flow_loss",
    "incremental_loss",
    "masked_l1",
    "overall_loss",
    "resource_loss",
]
