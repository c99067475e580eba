"""CSV outputs: schema-versioned, byte-reproducible tables."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import pandas as pd

from .engine import IterationTrace

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FLOAT_FORMAT = "%.10g"

TRACE_COLUMNS = ["sample_id", "t", "P0", "P1", "p", "i", "entered", "flops_step"]
LOG_COLUMNS = ["step", "phase", "r", "flow", "resource", "incremental", "overall"]


def write_csv(frame: pd.DataFrame, path: Path | str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("w", encoding="utf-8", newline="") as handle:
        handle.write(f"# schema-version: {SCHEMA_VERSION}\n")
        frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.debug("Wrote table", extra={"path": str(target), "rows": len(frame)})
    return target


def read_csv(path: Path | str) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def trace_frame(traces: Iterable[IterationTrace]) -> pd.DataFrame:
    """One row per (sample, step) plus a ``total`` row per sample."""

    rows = []
    for trace in traces:
        for step in trace.steps:
            rows.append(
                {
                    "sample_id": trace.sample_id,
                    "t": str(step.t),
                    "P0": step.P0,
                    "P1": step.P1,
                    "p": step.p,
                    "i": step.i,
                    "entered": int(step.entered),
                    "flops_step": step.flops_step,
                }
            )
        rows.append(
            {
                "sample_id": trace.sample_id,
                "t": "total",
                "P0": float("nan"),
                "P1": float("nan"),
                "p": float("nan"),
                "i": float("nan"),
                "entered": trace.updates_entered,
                "flops_step": trace.flops_total,
            }
        )
    return pd.DataFrame(rows, columns=TRACE_COLUMNS)


def log_frame(log: Sequence[Mapping[str, object]]) -> pd.DataFrame:
    return pd.DataFrame(list(log), columns=LOG_COLUMNS)


__all__ = [
    "LOG_COLUMNS",
    "SCHEMA_VERSION",
    "TRACE_COLUMNS",
    "log_frame",
    "read_csv",
    "trace_frame",
    "write_csv",
]
