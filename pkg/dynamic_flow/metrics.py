"""Flow accuracy metrics, the bottleneck statistic and evaluation reports."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.ndimage import map_coordinates

from .config import InferMode
from .engine import IterationTrace, infer
from .errors import ContractError, EmptyMaskError
from .models import DynamicFlowModel
from .models.policy import PolicyVariant
from .synthdata import SynthSample

logger = logging.getLogger(__name__)

F1_EPE_THRESHOLD = 3.0
F1_RATIO_THRESHOLD = 0.05
F1_EPSILON = 1e-8

REPORT_COLUMNS = ["r", "group", "n", "epe_mean", "f1_all", "updates_mean", "flops_mean"]
SAMPLE_COLUMNS = ["sample_id", "difficulty", "r", "epe", "epe_full", "f1_all", "updates_entered", "flops_total"]


def _pixel_errors(f: np.ndarray, f_gt: np.ndarray, valid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    f = np.asarray(f, dtype=np.float64)
    f_gt = np.asarray(f_gt, dtype=np.float64)
    if f.shape != f_gt.shape or f.shape[-3] != 2:
        raise ContractError(f"flow shapes must match as [...,2,H,W], got {f.shape} and {f_gt.shape}")
    mask = np.broadcast_to(np.asarray(valid, dtype=bool), f.shape[:-3] + f.shape[-2:])
    if not mask.any():
        raise EmptyMaskError("No valid pixels to evaluate")
    error = np.sqrt(((f - f_gt) ** 2).sum(axis=-3))
    magnitude = np.sqrt((f_gt**2).sum(axis=-3))
    return error[mask], magnitude[mask]


def epe(f: np.ndarray, f_gt: np.ndarray, valid: np.ndarray) -> float:
    """Mean Euclidean endpoint error over valid pixels."""

    error, _ = _pixel_errors(f, f_gt, valid)
    return float(error.mean())


def f1_all(f: np.ndarray, f_gt: np.ndarray, valid: np.ndarray) -> float:
    """Outlier fraction: EPE > 3 and EPE / max(|f_gt|, ε) > 5%."""

    error, magnitude = _pixel_errors(f, f_gt, valid)
    outliers = (error > F1_EPE_THRESHOLD) & (error / np.maximum(magnitude, F1_EPSILON) > F1_RATIO_THRESHOLD)
    return float(outliers.mean())


@dataclass
class BottleneckHistogram:
    """Share of samples (percent) whose EPE first comes within ``tol`` of its best at step t."""

    min_steps: List[int]
    percent: np.ndarray

    def frame(self) -> pd.DataFrame:
        return pd.DataFrame({"t": np.arange(1, len(self.percent) + 1), "percent": self.percent})


def bottleneck_step(sequence: Sequence[float], tol: float = 0.01) -> int:
    values = np.asarray(sequence, dtype=np.float64)
    if values.size == 0:
        raise ContractError("an EPE sequence needs at least one step")
    best = values.min()
    return int(np.flatnonzero(np.abs(values - best) < tol)[0]) + 1


def bottleneck_histogram(epe_sequences: Sequence[Sequence[float]], tol: float = 0.01) -> BottleneckHistogram:
    if not epe_sequences:
        raise ContractError("bottleneck_histogram needs at least one sequence")
    length = len(epe_sequences[0])
    if any(len(sequence) != length for sequence in epe_sequences):
        raise ContractError("every EPE sequence must cover the same number of steps")
    steps = [bottleneck_step(sequence, tol) for sequence in epe_sequences]
    counts = np.bincount(np.asarray(steps) - 1, minlength=length).astype(np.float64)
    return BottleneckHistogram(min_steps=steps, percent=100.0 * counts / counts.sum())


def upsample_flow(flow: np.ndarray, downscale: int) -> np.ndarray:
    """Bilinear ×s upsampling of a ``[2,h,w]`` feature-grid flow, values scaled to image pixels."""

    channels, height, width = flow.shape
    ys, xs = np.meshgrid(
        np.arange(height * downscale, dtype=np.float64) / downscale,
        np.arange(width * downscale, dtype=np.float64) / downscale,
        indexing="ij",
    )
    return np.stack(
        [map_coordinates(flow[c], [ys, xs], order=1, mode="nearest") * downscale for c in range(channels)]
    )


@dataclass
class SampleResult:
    sample_id: int
    difficulty: str
    r: float
    epe: float
    f1_all: float
    epe_full: float
    updates_entered: int
    flops_total: int
    trace: IterationTrace = field(repr=False)
    step_epe: List[float] = field(default_factory=list, repr=False)


def evaluate_sample(
    model: DynamicFlowModel,
    sample: SynthSample,
    sample_id: int,
    r: float,
    *,
    t_test: int = 12,
    mode: InferMode = "policy",
    t_fixed: Optional[int] = None,
    variant: PolicyVariant = "full",
    record_steps: bool = False,
) -> SampleResult:
    s = model.config.downscale
    gt = sample.flow_gt[:, ::s, ::s]
    valid = sample.valid[::s, ::s]
    flow, trace = infer(
        model,
        sample,
        r,
        t_test=t_test,
        mode=mode,
        t_fixed=t_fixed,
        variant=variant,
        sample_id=sample_id,
        record_flows=record_steps,
    )
    return SampleResult(
        sample_id=sample_id,
        difficulty=sample.difficulty,
        r=r,
        epe=epe(flow * s, gt, valid),
        f1_all=f1_all(flow * s, gt, valid),
        epe_full=epe(upsample_flow(flow, s), sample.flow_gt, sample.valid),
        updates_entered=trace.updates_entered,
        flops_total=trace.flops_total,
        trace=trace,
        step_epe=[epe(step * s, gt, valid) for step in trace.step_flows],
    )


def evaluate(
    model: DynamicFlowModel,
    samples: Sequence[SynthSample],
    r: float,
    *,
    workers: int = 1,
    **options,
) -> List[SampleResult]:
    """Run inference over ``samples``; results keep dataset order regardless of ``workers``."""

    def run(index: int) -> SampleResult:
        return evaluate_sample(model, samples[index], index, r, **options)

    if workers > 1 and len(samples) < 2:
        logger.warning("Skipping worker fan-out for a single sample", extra={"workers": workers})
        workers = 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(len(samples))))
    return [run(index) for index in range(len(samples))]


@dataclass
class EvalReport:
    """Per-sample results and their per-(r, group) aggregates."""

    per_sample: pd.DataFrame

    @classmethod
    def from_results(cls, results: Sequence[SampleResult]) -> "EvalReport":
        rows = [
            {
                "sample_id": result.sample_id,
                "difficulty": result.difficulty,
                "r": result.r,
                "epe": result.epe,
                "f1_all": result.f1_all,
                "epe_full": result.epe_full,
                "updates_entered": result.updates_entered,
                "flops_total": result.flops_total,
            }
            for result in results
        ]
        return cls(per_sample=pd.DataFrame(rows, columns=SAMPLE_COLUMNS))

    def summary(self, groups: Sequence[str] = ("all", "easy", "hard")) -> pd.DataFrame:
        rows: List[Dict[str, object]] = []
        for r in sorted(self.per_sample["r"].unique()):
            at_r = self.per_sample[self.per_sample["r"] == r]
            for group in sorted(groups):
                members = at_r if group == "all" else at_r[at_r["difficulty"] == group]
                if members.empty:
                    continue
                rows.append(
                    {
                        "r": float(r),
                        "group": group,
                        "n": int(len(members)),
                        "epe_mean": float(members["epe"].mean()),
                        "f1_all": float(members["f1_all"].mean()),
                        "updates_mean": float(members["updates_entered"].mean()),
                        "flops_mean": float(members["flops_total"].mean()),
                    }
                )
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def sweep_report(
    model: DynamicFlowModel,
    eval_set: Sequence[SynthSample],
    r_values: Sequence[float],
    *,
    groups: Sequence[str] = ("all",),
    workers: int = 1,
    **options,
) -> pd.DataFrame:
    """One row per (r, group), ascending r."""

    if not r_values:
        raise ContractError("sweep_report needs at least one r value")
    results: List[SampleResult] = []
    for r in sorted(set(float(value) for value in r_values)):
        if not 0 < r <= 1:
            raise ContractError(f"r values must lie in (0, 1], got {r}")
        results.extend(evaluate(model, eval_set, r, workers=workers, **options))
        logger.info("Swept resource preference", extra={"r": r, "samples": len(eval_set)})
    summary = EvalReport.from_results(results).summary(groups)
    # a repeated r is evaluated once and its rows repeated
    frames = [summary[summary["r"] == float(r)] for r in sorted(r_values)]
    return pd.concat(frames, ignore_index=True)


def rank_difficulty(errors: Sequence[float]) -> List[str]:
    """Label the lower-error half ``easy`` and the rest ``hard`` (stable on ties)."""

    order = np.argsort(np.asarray(errors, dtype=np.float64), kind="stable")
    labels = ["hard"] * len(order)
    for position in order[: len(order) // 2]:
        labels[int(position)] = "easy"
    return labels


def iteration_allocation(results: Sequence[SampleResult], t_test: int, labels: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Mean share (percent) of the ``t_test`` update slots each group entered."""

    groups = list(labels) if labels is not None else [result.difficulty for result in results]
    frame = pd.DataFrame(
        {
            "group": groups,
            "entered_percent": [100.0 * result.updates_entered / t_test for result in results],
        }
    )
    rows = [{"group": "all", "n": len(frame), "entered_percent": float(frame["entered_percent"].mean())}]
    for group in sorted(frame["group"].unique()):
        members = frame[frame["group"] == group]
        rows.append({"group": group, "n": len(members), "entered_percent": float(members["entered_percent"].mean())})
    return pd.DataFrame(rows, columns=["group", "n", "entered_percent"])


__all__ = [
    "BottleneckHistogram",
    "EvalReport",
    "REPORT_COLUMNS",
    "SAMPLE_COLUMNS",
    "SampleResult",
    "bottleneck_histogram",
    "bottleneck_step",
    "epe",
    "evaluate",
    "evaluate_sample",
    "f1_all",
    "iteration_allocation",
    "rank_difficulty",
    "sweep_report",
    "upsample_flow",
]
