"""Binary parameter checkpoints.

Layout (all integers little-endian unsigned 32-bit)::

    b"DFCK" | version | count
    repeated count times, parameters sorted by name:
        name_length | name (UTF-8) | ndim | dim_0 ... dim_{ndim-1}
        payload: prod(dims) float64 little-endian, row-major
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import BinaryIO, Dict, Mapping

import numpy as np

from ..errors import CheckpointFormatError

logger = logging.getLogger(__name__)

MAGIC = b"DFCK"
VERSION = 1
_U32 = struct.Struct("<I")


def _read_u32(handle: BinaryIO) -> int:
    raw = handle.read(4)
    if len(raw) != 4:
        raise CheckpointFormatError("Truncated checkpoint header")
    return _U32.unpack(raw)[0]


def save_checkpoint(state: Mapping[str, np.ndarray], path: Path | str) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(_U32.pack(VERSION))
        handle.write(_U32.pack(len(state)))
        for name in sorted(state):
            array = np.ascontiguousarray(state[name], dtype="<f8")
            encoded = name.encode("utf-8")
            handle.write(_U32.pack(len(encoded)))
            handle.write(encoded)
            handle.write(_U32.pack(array.ndim))
            for dim in array.shape:
                handle.write(_U32.pack(dim))
            handle.write(array.tobytes(order="C"))
    logger.debug("Saved checkpoint", extra={"path": str(target), "parameters": len(state)})
    return target


def load_checkpoint(path: Path | str) -> Dict[str, np.ndarray]:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Checkpoint not found at {source}")
    state: Dict[str, np.ndarray] = {}
    with source.open("rb") as handle:
        if handle.read(4) != MAGIC:
            raise CheckpointFormatError(f"{source} is not a checkpoint file")
        version = _read_u32(handle)
        if version != VERSION:
            raise CheckpointFormatError(f"Unsupported checkpoint version {version}")
        for _ in range(_read_u32(handle)):
            name = handle.read(_read_u32(handle)).decode("utf-8")
            shape = tuple(_read_u32(handle) for _ in range(_read_u32(handle)))
            count = int(np.prod(shape, dtype=np.int64))
            payload = handle.read(8 * count)
            if len(payload) != 8 * count:
                raise CheckpointFormatError(f"Truncated payload for parameter {name}")
            state[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return state


__all__ = ["MAGIC", "VERSION", "load_checkpoint", "save_checkpoint"]
