"""Soft-gated training rollouts, hard-skip inference and the FLOPs ledger.

Training always runs the update operator T times and blends each new state
with the previous one by the soft gate p. Inference turns the gate into a
hard decision: an update is entered only when the previous step's logits
favour entering, and skipped steps carry the state forward untouched.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from . import seeding
from .config import InferMode, TrainConfig
from .errors import ContractError, NonFiniteError
from .flops import FlopsLedger
from .losses import LossBreakdown, flow_loss, incremental_loss, overall_loss, resource_loss
from .models import DynamicFlowModel, GateOutput
from .models.backbone import Encoding
from .models.policy import NoiseSource, PolicyVariant
from .synthdata import FlowBatch, SynthSample, collate
from .tensorcore import Optimizer, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

GateValues = Union[Tensor, float, np.ndarray]


def aggregate(prev: Tensor, curr: Tensor, p: GateValues) -> Tensor:
    """curr·p + prev·(1 − p), with one p per sample."""

    if prev.shape != curr.shape:
        raise ContractError(f"cannot aggregate {prev.shape} with {curr.shape}")
    batch = prev.shape[0]
    extra = (1,) * (prev.ndim - 1)
    if isinstance(p, Tensor):
        gate = p.reshape(batch, *extra)
    else:
        gate = Tensor(np.broadcast_to(np.asarray(p, dtype=np.float64), (batch,)).reshape(batch, *extra))
    return curr * gate + prev * (1.0 - gate)


@dataclass
class StepRecord:
    t: int
    entered: bool
    flops_step: int
    P0: float = float("nan")
    P1: float = float("nan")
    p: float = float("nan")
    i: float = float("nan")


@dataclass
class IterationTrace:
    """Per-step gate values and FLOPs charged for one sample."""

    sample_id: int
    encoder_flops: int
    steps: List[StepRecord] = field(default_factory=list)
    step_flows: List[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def updates_entered(self) -> int:
        return sum(1 for step in self.steps if step.entered)

    @property
    def flops_total(self) -> int:
        return self.encoder_flops + sum(step.flops_step for step in self.steps)

    def entered_flags(self) -> List[bool]:
        return [step.entered for step in self.steps]


@dataclass
class Rollout:
    """Everything a soft-gated training pass produces."""

    encoding: Encoding
    flows: List[Tensor]
    agg_flows: List[Tensor]
    gates: List[GateOutput]
    p: List[Tensor]


def _record_gate(record: StepRecord, gate: GateOutput, index: int) -> None:
    record.P0 = float(gate.P.data[index, 0])
    record.P1 = float(gate.P.data[index, 1])
    record.p = float(gate.p.data[index])
    if gate.i is not None:
        record.i = float(gate.i.data[index])


def rollout(
    model: DynamicFlowModel,
    pair: np.ndarray,
    T: int,
    r: Union[float, np.ndarray],
    *,
    noise: bool = False,
    rng: NoiseSource = None,
    variant: PolicyVariant = "full",
    gates: Optional[Sequence[GateValues]] = None,
    force_open: bool = False,
) -> Rollout:
    """The training forward pass: T updates, soft aggregation with p_1 .. p_{T−1}.

    ``gates`` pins p_t (the policy still runs to keep its history cell);
    ``force_open`` skips the policy and fixes every gate at 1.
    """

    if T < 2:
        raise ContractError(f"a training rollout needs T >= 2, got {T}")
    if gates is not None and len(gates) != T - 1:
        raise ContractError(f"{len(gates)} pinned gates given for T={T}")
    backbone, policy = model.backbone, model.policy
    images = Tensor(pair)
    batch = pair.shape[0]
    encoding = backbone.encode(images)
    _, _, height, width = encoding.features.phi.shape

    phi, flow = backbone.update(encoding.features.phi, Tensor(np.zeros((batch, 2, height, width))), encoding)
    phi_hat, flow_hat = phi, flow
    flows, agg_flows = [flow], [flow]
    gate_outputs: List[GateOutput] = []
    used: List[Tensor] = []
    state = policy.initial_state(batch, height, width)

    for t in range(1, T):
        if force_open:
            p_t: GateValues = Tensor(np.ones(batch))
        else:
            state, gate = policy(phi_hat, state, policy.embedding(t, T), r, noise=noise, rng=rng, variant=variant)
            gate_outputs.append(gate)
            p_t = gate.p if gates is None else as_gate(gates[t - 1], batch)
        used.append(p_t)
        phi, flow = backbone.update(phi_hat, flow_hat, encoding)
        flows.append(flow)
        if t < T - 1:
            phi_hat = aggregate(phi_hat, phi, p_t)
        flow_hat = aggregate(flow_hat, flow, p_t)
        agg_flows.append(flow_hat)
    return Rollout(encoding=encoding, flows=flows, agg_flows=agg_flows, gates=gate_outputs, p=used)


def as_gate(value: GateValues, batch: int) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=np.float64), (batch,)).copy())


def sample_resource(cfg: TrainConfig, step: int, batch: int) -> Union[float, np.ndarray]:
    rng = seeding.stream(cfg.seed, "r-sampling", step)
    low, high = cfg.r_range
    if cfg.per_sample_r:
        return rng.uniform(low, high, size=batch)
    return float(rng.uniform(low, high))


def training_losses(batch: FlowBatch, result: Rollout, r: Union[float, np.ndarray], cfg: TrainConfig) -> LossBreakdown:
    flow_term = flow_loss(batch.flow_gt, result.agg_flows, batch.valid)
    if cfg.force_open:
        return overall_loss(flow_term, lambda_res=0.0, lambda_incre=0.0)
    resource_term = resource_loss(result.p, r, cfg.resource_kind)
    incremental_term = None
    if cfg.effective_lambda_incre != 0 and all(gate.i is not None for gate in result.gates):
        T = len(result.agg_flows)
        incremental_term = incremental_loss(
            batch.flow_gt,
            result.agg_flows[: T - 1],
            result.flows[1:],
            [gate.i for gate in result.gates],
            batch.valid,
        )
    return overall_loss(
        flow_term,
        resource_term,
        incremental_term,
        lambda_res=cfg.lambda_res,
        lambda_incre=cfg.effective_lambda_incre,
    )


def train_step(
    model: DynamicFlowModel,
    batch: FlowBatch,
    cfg: TrainConfig,
    optimizer: Optimizer,
    step: int = 0,
    *,
    gates: Optional[Sequence[GateValues]] = None,
) -> Tuple[LossBreakdown, List[IterationTrace]]:
    """One pass of the training algorithm followed by an optimizer step.

    Raises :class:`NonFiniteError` before touching any parameter when the loss
    or a gradient is not finite.
    """

    if len(batch) == 0:
        raise ContractError("train_step needs a non-empty batch")
    r = sample_resource(cfg, step, len(batch))
    noise_streams = [seeding.stream(cfg.seed, "gumbel", seed, step) for seed in batch.seeds]
    result = rollout(
        model,
        batch.pair,
        cfg.t_train,
        r,
        noise=cfg.noise,
        rng=noise_streams,
        variant=cfg.policy_variant,
        gates=gates,
        force_open=cfg.force_open,
    )
    losses = training_losses(batch, result, r, cfg)
    if not np.isfinite(losses.overall):
        raise NonFiniteError(f"Non-finite loss at step {step}: {losses.as_row()}")

    model.zero_grad()
    backward(losses.graph, model.parameters())
    norm = optimizer.step()
    logger.debug("Training step", extra={"step": step, "overall": losses.overall, "grad_norm": norm})

    height, width = batch.pair.shape[2:]
    ledger = FlopsLedger.for_model(model, height, width)
    traces = []
    for index in range(len(batch)):
        trace = IterationTrace(sample_id=batch.sample_ids[index], encoder_flops=ledger.encoder)
        for t in range(1, cfg.t_train + 1):
            record = StepRecord(t=t, entered=True, flops_step=ledger.update)
            if t <= len(result.gates):
                _record_gate(record, result.gates[t - 1], index)
                record.flops_step += ledger.policy
            trace.steps.append(record)
        traces.append(trace)
    return losses, traces


def infer(
    model: DynamicFlowModel,
    sample: Union[SynthSample, np.ndarray],
    r: float,
    *,
    t_test: int = 12,
    mode: InferMode = "policy",
    t_fixed: Optional[int] = None,
    variant: PolicyVariant = "full",
    gates: Optional[Sequence[bool]] = None,
    sample_id: int = 0,
    record_flows: bool = False,
) -> Tuple[np.ndarray, IterationTrace]:
    """Hard-skip inference for a single sample; returns the ``[2,h,w]`` flow and its trace.

    ``gates`` pins the enter/skip decision of steps 2 .. T_test.
    """

    if not 0 < r <= 1:
        raise ContractError(f"resource preference r must lie in (0, 1], got {r}")
    pair = sample.pair() if isinstance(sample, SynthSample) else np.asarray(sample, dtype=np.float64)
    if pair.ndim == 3:
        pair = pair[None]
    height, width = pair.shape[2:]
    ledger = FlopsLedger.for_model(model, height, width)
    backbone, policy = model.backbone, model.policy
    trace = IterationTrace(sample_id=sample_id, encoder_flops=ledger.encoder)

    steps = t_test if mode != "fixed" else (t_fixed or t_test)
    if gates is not None and len(gates) != steps - 1:
        raise ContractError(f"{len(gates)} pinned gates given for {steps} steps")

    with no_grad():
        encoding = backbone.encode(Tensor(pair))
        _, _, fh, fw = encoding.features.phi.shape
        phi_hat = encoding.features.phi
        flow_hat = Tensor(np.zeros((1, 2, fh, fw)))
        state = policy.initial_state(1, fh, fw)
        enter_next = True
        stopped = False

        for t in range(1, steps + 1):
            entered = t == 1 or (enter_next and not stopped)
            if t > 1 and gates is not None and not stopped:
                entered = bool(gates[t - 2])
            if entered:
                phi_hat, flow_hat = backbone.update(phi_hat, flow_hat, encoding)
            elif mode == "exit":
                stopped = True
            record = StepRecord(t=t, entered=entered, flops_step=ledger.update if entered else 0)

            if mode != "fixed" and t <= steps - 1 and not stopped:
                state, gate = policy(phi_hat, state, policy.embedding(t, steps), r, noise=False, variant=variant)
                enter_next = bool(gate.enters()[0])
                _record_gate(record, gate, 0)
                record.flops_step += ledger.policy
            trace.steps.append(record)
            if record_flows:
                trace.step_flows.append(flow_hat.data[0].copy())

    return flow_hat.data[0].copy(), trace


def infer_exit_prefix_ok(trace: IterationTrace) -> bool:
    """True when the entered flags are ones followed only by zeros."""

    flags = trace.entered_flags()
    first_skip = next((index for index, flag in enumerate(flags) if not flag), len(flags))
    return not any(flags[first_skip:])


@dataclass
class FitResult:
    log: List[Dict[str, float]] = field(default_factory=list)
    aborted: bool = False
    error: Optional[str] = None


def _phase_parameters(model: DynamicFlowModel, phase: str):
    if phase == "backbone":
        return model.backbone_parameters()
    if phase == "policy":
        return model.policy_parameters()
    return model.backbone_parameters() + model.policy_parameters()


def _batches(count: int, batch_size: int, seed: int, steps: int, offset: int) -> List[np.ndarray]:
    # batches may straddle epochs; every epoch is a fresh seeded permutation
    size = min(batch_size, count)
    order: List[int] = []
    epoch = 0
    while len(order) < steps * size:
        order.extend(seeding.stream(seed, "batching", offset, epoch).permutation(count).tolist())
        epoch += 1
    return [np.asarray(order[k * size : (k + 1) * size]) for k in range(steps)]


def fit(
    model: DynamicFlowModel,
    samples: Sequence[SynthSample],
    cfg: TrainConfig,
    *,
    snapshot: Optional[Callable[[DynamicFlowModel, int], None]] = None,
    progress: bool = True,
) -> FitResult:
    """Train for ``cfg.steps`` (plus ``cfg.backbone_steps`` in a two-phase run).

    ``snapshot(model, step)`` is called every ``cfg.checkpoint_every`` steps
    and once more with the last good parameters on abort.
    """

    if not samples:
        raise ContractError("cannot train on an empty dataset")
    if cfg.phase == "two_phase":
        plan = [
            cfg.model_copy(update={"phase": "backbone", "steps": cfg.backbone_steps or cfg.steps}),
            cfg.model_copy(update={"phase": "policy"}),
        ]
    else:
        plan = [cfg]

    result = FitResult()
    global_step = 0
    downscale = model.config.downscale
    for offset, phase_cfg in enumerate(plan):
        optimizer = Optimizer(
            _phase_parameters(model, phase_cfg.phase),
            phase_cfg.lr,
            mode=phase_cfg.optimizer,
            momentum=phase_cfg.momentum,
            clip_norm=phase_cfg.clip_norm,
        )
        logger.info("Starting training phase", extra={"phase": phase_cfg.phase, "steps": phase_cfg.steps})
        schedule = _batches(len(samples), phase_cfg.batch_size, phase_cfg.seed, phase_cfg.steps, offset)
        for indices in tqdm(schedule, desc=phase_cfg.phase, disable=not progress):
            global_step += 1
            batch = collate([samples[index] for index in indices], downscale, ids=indices.tolist())
            try:
                losses, _ = train_step(model, batch, phase_cfg, optimizer, global_step)
            except NonFiniteError as exc:
                logger.warning("Aborting training", extra={"step": global_step, "error": str(exc)})
                result.aborted = True
                result.error = str(exc)
                if snapshot is not None:
                    snapshot(model, global_step - 1)
                return result
            r = sample_resource(phase_cfg, global_step, len(batch))
            result.log.append(
                {
                    "step": global_step,
                    "phase": phase_cfg.phase,
                    "r": float(np.mean(r)),
                    **losses.as_row(),
                }
            )
            if snapshot is not None and global_step % cfg.checkpoint_every == 0:
                snapshot(model, global_step)
    if snapshot is not None:
        snapshot(model, global_step)
    return result


__all__ = [
    "FitResult",
    "IterationTrace",
    "Rollout",
    "StepRecord",
    "aggregate",
    "as_gate",
    "fit",
    "infer",
    "infer_exit_prefix_ok",
    "rollout",
    "sample_resource",
    "train_step",
    "training_losses",
]
