"""Synthetic image pairs with exact ground-truth flow.

Samples are built by inverse warping: ``image2(x) = bilinear(image1, x + flow(x))``,
so the ground truth is exact and hole-free wherever the source coordinate
lands inside the frame. Easy samples are small translations, hard samples are
larger rotations or affine motions.
"""
from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates

from . import seeding
from .errors import ContractError, DatasetFormatError

logger = logging.getLogger(__name__)

Difficulty = Literal["easy", "hard"]
FlowKind = Literal["translation", "rotation", "affine"]
Size = Union[int, Tuple[int, int]]

MAGIC = b"DFDS"
VERSION = 1
DIFFICULTY_CODES = {"easy": 0, "hard": 1}
EASY_RANGE = (0.5, 2.0)
HARD_RANGE = (4.0, 8.0)

_HEADER = struct.Struct("<IIIII")
_RECORD_HEAD = struct.Struct("<QB")


@dataclass
class SynthSample:
    image1: np.ndarray
    image2: np.ndarray
    flow_gt: np.ndarray
    valid: np.ndarray
    difficulty: Difficulty
    seed: int

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.image1.shape

    def pair(self) -> np.ndarray:
        """``[2·Ci, H, W]`` network input, matching frame first.

        The backbone matches each pixel of the first stacked frame to
        ``x + flow(x)`` in the second, so image2 leads.
        """

        return np.concatenate([self.image2, self.image1], axis=0)


@dataclass
class FlowBatch:
    """Samples stacked for the network, ground truth on the feature grid."""

    pair: np.ndarray
    flow_gt: np.ndarray
    valid: np.ndarray
    seeds: List[int]
    difficulty: List[Difficulty]
    sample_ids: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.pair.shape[0]


def feature_ground_truth(flow_gt: np.ndarray, valid: np.ndarray, downscale: int) -> Tuple[np.ndarray, np.ndarray]:
    """Subsample image-resolution ground truth to the feature grid, in feature-grid pixels."""

    s = downscale
    return flow_gt[..., ::s, ::s] / s, valid[..., ::s, ::s]


def collate(samples: Sequence[SynthSample], downscale: int, ids: Optional[Sequence[int]] = None) -> FlowBatch:
    """Stack ``samples``; ``ids`` are their dataset positions (defaults to 0..n-1)."""

    if not samples:
        raise ContractError("cannot build a batch from zero samples")
    if ids is not None and len(ids) != len(samples):
        raise ContractError(f"{len(ids)} sample ids for {len(samples)} samples")
    flows, masks = zip(*(feature_ground_truth(sample.flow_gt, sample.valid, downscale) for sample in samples))
    return FlowBatch(
        pair=np.stack([sample.pair() for sample in samples]),
        flow_gt=np.stack(flows),
        valid=np.stack(masks),
        seeds=[sample.seed for sample in samples],
        difficulty=[sample.difficulty for sample in samples],
        sample_ids=[int(index) for index in ids] if ids is not None else list(range(len(samples))),
    )


def _grid(size: Size) -> Tuple[int, int]:
    height, width = (size, size) if isinstance(size, int) else size
    if min(height, width) < 8:
        raise ContractError(f"image size must be at least 8x8, got {height}x{width}")
    return height, width


def gen_texture(seed: int, size: Size, octaves: int = 3) -> np.ndarray:
    """Band-limited noise in [0, 1]: smoothed octaves, each finer and fainter than the last."""

    height, width = _grid(size)
    if octaves < 1:
        raise ContractError(f"octaves must be >= 1, got {octaves}")
    rng = seeding.stream(seed, "data", 0)
    texture = np.zeros((height, width))
    for octave in range(octaves):
        layer = gaussian_filter(rng.standard_normal((height, width)), sigma=4.0 / 2**octave, mode="reflect")
        spread = layer.std()
        if spread > 0:
            texture += (0.5**octave) * layer / spread
    low, high = texture.min(), texture.max()
    if high == low:
        return np.zeros_like(texture)
    return (texture - low) / (high - low)


def _centered_grid(height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return xs - (width - 1) / 2.0, ys - (height - 1) / 2.0


def gen_flow(
    kind: FlowKind,
    magnitude: float,
    size: Size,
    rng: Optional[np.random.Generator] = None,
    *,
    angle: Optional[float] = None,
) -> np.ndarray:
    """``[2, H, W]`` displacement field whose largest vector has length ``magnitude``."""

    height, width = _grid(size)
    if magnitude < 0:
        raise ContractError(f"flow magnitude must be non-negative, got {magnitude}")
    rng = rng or np.random.default_rng(0)
    if magnitude == 0:
        return np.zeros((2, height, width))

    if kind == "translation":
        theta = rng.uniform(0.0, 2.0 * math.pi) if angle is None else angle
        flow = np.empty((2, height, width))
        flow[0] = magnitude * math.cos(theta)
        flow[1] = magnitude * math.sin(theta)
        return flow

    dx, dy = _centered_grid(height, width)
    if kind == "rotation":
        radius = float(np.sqrt(dx**2 + dy**2).max())
        alpha = 2.0 * math.asin(min(1.0, magnitude / (2.0 * radius)))
        if angle is None and rng.random() < 0.5:
            alpha = -alpha
        cos_a, sin_a = math.cos(alpha), math.sin(alpha)
        return np.stack([cos_a * dx - sin_a * dy - dx, sin_a * dx + cos_a * dy - dy])
    if kind == "affine":
        matrix = rng.uniform(-1.0, 1.0, size=(2, 2))
        offset = rng.uniform(-1.0, 1.0, size=2) * max(height, width) / 2.0
        flow = np.stack(
            [matrix[0, 0] * dx + matrix[0, 1] * dy + offset[0], matrix[1, 0] * dx + matrix[1, 1] * dy + offset[1]]
        )
        peak = float(np.sqrt((flow**2).sum(axis=0)).max())
        return flow * (magnitude / peak) if peak > 0 else np.zeros_like(flow)
    raise ContractError(f"Unknown flow kind {kind!r}")


def warp(image: np.ndarray, flow: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Sample ``image`` (``[Ci,H,W]``) at ``x + flow(x)``; returns the warped image and validity mask."""

    _, height, width = image.shape
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    sx = xs + flow[0]
    sy = ys + flow[1]
    valid = (sx >= 0) & (sx <= width - 1) & (sy >= 0) & (sy <= height - 1)
    warped = np.stack(
        [map_coordinates(channel, [sy, sx], order=1, mode="nearest") for channel in image]
    )
    return warped, valid


def make_sample(
    seed: int,
    difficulty: Difficulty,
    *,
    height: int = 32,
    width: int = 64,
    channels: int = 1,
    downscale: int = 2,
    magnitude: Optional[float] = None,
    kind: Optional[FlowKind] = None,
    angle: Optional[float] = None,
) -> SynthSample:
    """One sample; magnitudes are drawn in feature-grid pixels and scaled by ``downscale``.

    ``magnitude``, ``kind`` and ``angle`` override the random draws (in image pixels).
    """

    if difficulty not in DIFFICULTY_CODES:
        raise ContractError(f"Unknown difficulty {difficulty!r}")
    rng = seeding.stream(seed, "data", 1)
    texture_seeds = rng.integers(0, 2**32, size=channels)
    image1 = np.stack([gen_texture(int(s), (height, width)) for s in texture_seeds])

    if difficulty == "easy":
        chosen_kind: FlowKind = "translation"
        low, high = EASY_RANGE
    else:
        chosen_kind = "rotation" if rng.random() < 0.5 else "affine"
        low, high = HARD_RANGE
    drawn = rng.uniform(low, high) * downscale
    flow = gen_flow(
        kind or chosen_kind,
        drawn if magnitude is None else magnitude,
        (height, width),
        rng,
        angle=angle,
    )
    image2, valid = warp(image1, flow)
    return SynthSample(image1=image1, image2=image2, flow_gt=flow, valid=valid, difficulty=difficulty, seed=int(seed))


def make_dataset(
    n: int,
    seed: int,
    *,
    hard_fraction: float = 0.5,
    height: int = 32,
    width: int = 64,
    channels: int = 1,
    downscale: int = 2,
) -> List[SynthSample]:
    if n < 0:
        raise ContractError(f"dataset size must be non-negative, got {n}")
    rng = seeding.stream(seed, "data")
    seeds = rng.integers(0, 2**63 - 1, size=n)
    hard = int(round(n * hard_fraction))
    labels: List[Difficulty] = ["hard"] * hard + ["easy"] * (n - hard)
    order = rng.permutation(n)
    samples = [
        make_sample(
            int(seeds[index]),
            labels[order[index]],
            height=height,
            width=width,
            channels=channels,
            downscale=downscale,
        )
        for index in range(n)
    ]
    logger.info("Generated dataset", extra={"count": n, "seed": seed, "hard": hard})
    return samples


def save_dataset(samples: Sequence[SynthSample], path: Path | str) -> Path:
    """Write the ``DFDS`` container; see README.md for the layout."""

    if not samples:
        raise ContractError("refusing to write an empty dataset")
    channels, height, width = samples[0].shape
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    with target.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(_HEADER.pack(VERSION, len(samples), height, width, channels))
        for sample in samples:
            if sample.shape != (channels, height, width):
                raise ContractError(f"sample {sample.seed} has shape {sample.shape}, expected {(channels, height, width)}")
            handle.write(_RECORD_HEAD.pack(sample.seed, DIFFICULTY_CODES[sample.difficulty]))
            for array in (sample.image1, sample.image2, sample.flow_gt):
                handle.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
            handle.write(np.ascontiguousarray(sample.valid, dtype=np.uint8).tobytes())
    logger.debug("Saved dataset", extra={"path": str(target), "count": len(samples)})
    return target


def _read_exact(handle: BinaryIO, size: int, what: str) -> bytes:
    raw = handle.read(size)
    if len(raw) != size:
        raise DatasetFormatError(f"Truncated dataset while reading {what}")
    return raw


def load_dataset(path: Path | str) -> List[SynthSample]:
    source = Path(path)
    if not source.exists():
        raise FileNotFoundError(f"Dataset not found at {source}")
    names = {code: name for name, code in DIFFICULTY_CODES.items()}
    samples: List[SynthSample] = []
    with source.open("rb") as handle:
        if handle.read(4) != MAGIC:
            raise DatasetFormatError(f"{source} is not a dataset file")
        version, count, height, width, channels = _HEADER.unpack(_read_exact(handle, _HEADER.size, "header"))
        if version != VERSION:
            raise DatasetFormatError(f"Unsupported dataset version {version}")
        image_bytes = 8 * channels * height * width
        for index in range(count):
            seed, code = _RECORD_HEAD.unpack(_read_exact(handle, _RECORD_HEAD.size, f"record {index}"))
            if code not in names:
                raise DatasetFormatError(f"Record {index} has unknown difficulty code {code}")
            image1 = np.frombuffer(_read_exact(handle, image_bytes, "image1"), dtype="<f8")
            image2 = np.frombuffer(_read_exact(handle, image_bytes, "image2"), dtype="<f8")
            flow = np.frombuffer(_read_exact(handle, 16 * height * width, "flow"), dtype="<f8")
            valid = np.frombuffer(_read_exact(handle, height * width, "valid"), dtype=np.uint8)
            samples.append(
                SynthSample(
                    image1=image1.astype(np.float64).reshape(channels, height, width),
                    image2=image2.astype(np.float64).reshape(channels, height, width),
                    flow_gt=flow.astype(np.float64).reshape(2, height, width),
                    valid=valid.reshape(height, width).astype(bool),
                    difficulty=names[code],
                    seed=int(seed),
                )
            )
    return samples


def file_checksum(path: Path | str) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


__all__ = [
    "Difficulty",
    "FlowBatch",
    "FlowKind",
    "SynthSample",
    "collate",
    "feature_ground_truth",
    "file_checksum",
    "gen_flow",
    "gen_texture",
    "load_dataset",
    "make_dataset",
    "make_sample",
    "save_dataset",
    "warp",
]
