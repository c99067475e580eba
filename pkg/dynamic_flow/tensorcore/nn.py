"""Parameter containers and the convolution layer used by every network."""
from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..flops import LayerSpec
from .functional import conv2d, conv_output_size
from .tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that always tracks gradients."""

    def __init__(self, data: np.ndarray, name: Optional[str] = None) -> None:
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal container: parameters and sub-modules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix=f"{name}.")
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(prefix=f"{name}.{index}.")

    def parameters(self) -> List[Parameter]:
        return [param for _, param in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], *, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise KeyError(f"State mismatch: missing={missing}, unexpected={unexpected}")
        for name, value in state.items():
            if name not in own:
                continue
            if own[name].shape != value.shape:
                raise ValueError(f"Parameter {name} has shape {own[name].shape}, checkpoint has {value.shape}")
            own[name].data = np.array(value, dtype=np.float64)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None


class ConvLayer(Module):
    """Square-kernel convolution with bias, uniformly initialised in ±sqrt(1/fan_in)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        *,
        stride: int = 1,
        padding: Optional[int] = None,
    ) -> None:
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        bound = math.sqrt(1.0 / (in_channels * kernel_size * kernel_size))
        self.weight = Parameter(
            rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size))
        )
        self.bias = Parameter(rng.uniform(-bound, bound, size=(out_channels,)))

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def output_size(self, height: int, width: int) -> Tuple[int, int]:
        return (
            conv_output_size(height, self.kernel_size, self.stride, self.padding),
            conv_output_size(width, self.kernel_size, self.stride, self.padding),
        )

    def spec(self, height: int, width: int) -> LayerSpec:
        out_h, out_w = self.output_size(height, width)
        return LayerSpec(
            kind="conv",
            kernel=self.kernel_size,
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            height=out_h,
            width=out_w,
            bias=True,
        )


__all__ = ["ConvLayer", "Module", "Parameter"]
