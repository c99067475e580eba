"""Neural-network primitives built on :mod:`dynamic_flow.tensorcore.tensor`."""
from __future__ import annotations

from typing import Literal, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from ..errors import ShapeError
from .tensor import Function, Tensor, concat

PointwiseKind = Literal["relu", "sigmoid", "tanh"]


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    # floor: trailing rows a stride cannot reach are dropped
    span = size + 2 * padding - kernel
    if span < 0 or stride < 1 or padding < 0:
        raise ShapeError(
            f"extent {size} with kernel {kernel}, stride {stride}, padding {padding} "
            "gives an empty output"
        )
    return span // stride + 1


class Conv2d(Function):
    """Cross-correlation via im2col and a single matrix product."""

    def forward(
        self,
        x: np.ndarray,
        weight: np.ndarray,
        bias: Optional[np.ndarray] = None,
        *,
        stride: int = 1,
        padding: int = 0,
    ) -> np.ndarray:
        if x.ndim != 4 or weight.ndim != 4:
            raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
        n, cin, height, width = x.shape
        cout, wcin, kh, kw = weight.shape
        if wcin != cin:
            raise ShapeError(f"conv2d input has {cin} channels but weight expects {wcin} (weight {weight.shape})")
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"conv2d kernels must be square with odd size, got {kh}x{kw}")
        if bias is not None and bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
        out_h = conv_output_size(height, kh, stride, padding)
        out_w = conv_output_size(width, kw, stride, padding)

        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # rows: (n, oh, ow); columns: (cin, kh, kw)
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, cin * kh * kw)
        out = cols @ weight.reshape(cout, -1).T
        if bias is not None:
            out = out + bias
        self.cols = cols
        self.geometry = (n, cin, height, width, kh, out_h, out_w, stride, padding)
        return np.ascontiguousarray(out.reshape(n, out_h, out_w, cout).transpose(0, 3, 1, 2))

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        n, cin, height, width, k, out_h, out_w, stride, padding = self.geometry
        weight = self.inputs[1].data
        cout = weight.shape[0]
        grad_rows = grad.transpose(0, 2, 3, 1).reshape(-1, cout)

        grad_weight = (grad_rows.T @ self.cols).reshape(weight.shape)
        grad_bias = grad_rows.sum(axis=0) if len(self.inputs) > 2 else None

        grad_cols = (grad_rows @ weight.reshape(cout, -1)).reshape(n, out_h, out_w, cin, k, k)
        grad_padded = np.zeros((n, cin, height + 2 * padding, width + 2 * padding))
        for i in range(k):
            for j in range(k):
                grad_padded[
                    :, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride
                ] += grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        grad_input = grad_padded[:, :, padding : padding + height, padding : padding + width]
        if len(self.inputs) > 2:
            return grad_input, grad_weight, grad_bias
        return grad_input, grad_weight


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    *,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, padding=padding)
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


class Relu(Function):
    # relu'(0) = 0
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.mask = a > 0
        return np.where(self.mask, a, 0.0)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = expit(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * (1.0 - self.out * self.out),)


_POINTWISE = {"relu": Relu, "sigmoid": Sigmoid, "tanh": Tanh}


def pointwise(x: Tensor, kind: PointwiseKind) -> Tensor:
    try:
        func = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"Unknown pointwise kind {kind!r}") from None
    return func.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


class GlobalAvgPool(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        if a.ndim != 4:
            raise ShapeError(f"global_avg_pool expects [N,C,H,W], got {a.shape}")
        return a.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        _, _, height, width = self.inputs[0].shape
        return (np.broadcast_to(grad / (height * width), self.inputs[0].shape).copy(),)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack ``[N,C_i,H,W]`` tensors along the channel axis."""

    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    reference: Tuple[int, ...] = parts[0].shape
    for part in parts:
        if part.ndim != 4 or (part.shape[0], *part.shape[2:]) != (reference[0], *reference[2:]):
            raise ShapeError(
                "concat_channels parts must share N, H and W; got "
                + ", ".join(str(p.shape) for p in parts)
            )
    if len(parts) == 1:
        return parts[0]
    return concat(parts, axis=1)


class InstanceNorm(Function):
    """Per-sample, per-channel standardisation over the spatial axes."""

    def forward(self, a: np.ndarray, eps: float) -> np.ndarray:
        if a.ndim != 4:
            raise ShapeError(f"instance_norm expects [N,C,H,W], got {a.shape}")
        centred = a - a.mean(axis=(2, 3), keepdims=True)
        self.inv_std = 1.0 / np.sqrt((centred**2).mean(axis=(2, 3), keepdims=True) + eps)
        self.out = centred * self.inv_std
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        mean_grad = grad.mean(axis=(2, 3), keepdims=True)
        mean_proj = (grad * self.out).mean(axis=(2, 3), keepdims=True)
        return (self.inv_std * (grad - mean_grad - self.out * mean_proj),)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return InstanceNorm.apply(x, eps=eps)


class Softmax(Function):
    def forward(self, a: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        shifted = a - a.max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        self.out = exp / exp.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


__all__ = [
    "PointwiseKind",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "global_avg_pool",
    "instance_norm",
    "pointwise",
    "relu",
    "sigmoid",
    "softmax",
    "tanh",
]
