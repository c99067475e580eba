"""All-pairs correlation volume and its windowed bilinear lookup."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractError, ShapeError
from ..tensorcore import Function, Tensor


@dataclass
class CorrVolume:
    """Correlations between every source pixel and every target pixel.

    ``corr`` is stored as ``[N, h·w, h, w]``: one target-grid slice per source
    pixel, sources in row-major order.
    """

    corr: Tensor
    height: int
    width: int

    def as_array(self) -> np.ndarray:
        """The volume indexed ``[N, h, w, h, w]``."""

        n = self.corr.shape[0]
        return self.corr.data.reshape(n, self.height, self.width, self.height, self.width)


def correlation_volume(fmap1: Tensor, fmap2: Tensor) -> CorrVolume:
    """corr(a, b) = <fmap1[a], fmap2[b]> / sqrt(Cf)."""

    if fmap1.shape != fmap2.shape or fmap1.ndim != 4:
        raise ShapeError(f"feature maps must share a [N,C,h,w] shape, got {fmap1.shape} and {fmap2.shape}")
    n, channels, height, width = fmap1.shape
    pixels = height * width
    source = fmap1.reshape(n, channels, pixels).transpose(0, 2, 1)
    target = fmap2.reshape(n, channels, pixels)
    corr = (source @ target) * (1.0 / math.sqrt(channels))
    return CorrVolume(corr=corr.reshape(n, pixels, height, width), height=height, width=width)


def _window_offsets(radius: int) -> Tuple[np.ndarray, np.ndarray]:
    # window index k = (dy + r)·(2r + 1) + (dx + r)
    span = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return dy.reshape(-1), dx.reshape(-1)


class CorrLookup(Function):
    """Bilinear samples of corr(x, x + flow(x) + d), zero outside the target grid.

    Differentiable with respect to both the volume and the flow.
    """

    def forward(self, corr: np.ndarray, flow: np.ndarray, radius: int) -> np.ndarray:
        n, pixels, height, width = corr.shape
        if flow.shape != (n, 2, height, width):
            raise ShapeError(f"flow of shape {flow.shape} does not match correlation grid {(n, 2, height, width)}")
        ys, xs = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
        dy, dx = _window_offsets(radius)
        sample_x = (xs.reshape(1, pixels) + flow[:, 0].reshape(n, pixels))[:, :, None] + dx
        sample_y = (ys.reshape(1, pixels) + flow[:, 1].reshape(n, pixels))[:, :, None] + dy

        x0 = np.floor(sample_x)
        y0 = np.floor(sample_y)
        wx = sample_x - x0
        wy = sample_y - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)

        flat = corr.reshape(n, pixels, height * width)
        corners = []
        for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
            cy, cx = y0 + oy, x0 + ox
            inside = (cy >= 0) & (cy < height) & (cx >= 0) & (cx < width)
            index = np.where(inside, cy * width + cx, 0)
            values = np.take_along_axis(flat, index, axis=2) * inside
            corners.append((index, inside, values))

        (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
        sampled = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11)

        self.saved = (corners, wx, wy, corr.shape)
        window = dx.size
        return np.ascontiguousarray(sampled.transpose(0, 2, 1)).reshape(n, window, height, width)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        corners, wx, wy, shape = self.saved
        n, pixels, height, width = shape
        window = grad.shape[1]
        g = grad.reshape(n, window, pixels).transpose(0, 2, 1)

        weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
        base = (np.arange(n)[:, None, None] * pixels + np.arange(pixels)[None, :, None]) * (height * width)
        grad_corr = np.zeros(n * pixels * height * width)
        for (index, inside, _), weight in zip(corners, weights):
            linear = (base + index).reshape(-1)
            grad_corr += np.bincount(linear, weights=(g * weight * inside).reshape(-1), minlength=grad_corr.size)

        (_, _, v00), (_, _, v01), (_, _, v10), (_, _, v11) = corners
        d_sample_x = (1 - wy) * (v01 - v00) + wy * (v11 - v10)
        d_sample_y = (1 - wx) * (v10 - v00) + wx * (v11 - v01)
        grad_flow = np.stack(
            [(g * d_sample_x).sum(axis=2), (g * d_sample_y).sum(axis=2)], axis=1
        ).reshape(n, 2, height, width)
        return grad_corr.reshape(shape), grad_flow


def lookup_corr(corr: CorrVolume, flow: Tensor, radius: int) -> Tensor:
    """Sample the ``(2r+1)²`` window around ``x + flow(x)`` for every source pixel."""

    if radius < 0:
        raise ContractError(f"lookup radius must be non-negative, got {radius}")
    return CorrLookup.apply(corr.corr, flow, radius=radius)


__all__ = ["CorrLookup", "CorrVolume", "correlation_volume", "lookup_corr"]
