"""Analytic floating-point operation counts.

Counting conventions (per sample, exact integers):

* ``conv``: ``2·K²·Cin·Cout·H'·W'`` multiply-adds, plus ``H'·W'·Cout`` when a
  bias is added.
* ``pointwise`` (relu, sigmoid, tanh), ``elementwise`` (add, mul, scale) and
  ``pool`` (one add per input element): ``elements · per_element``.
* ``matmul``: ``2·m·k·n``.
* ``lookup``: bilinear correlation sampling, ``elements · 7`` (four products
  and three sums per sampled value).
* ``gate``: the two-way softmax, ``elements · per_element`` with
  ``per_element = 6`` per sample.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal, Optional, Protocol, Sequence, Union

from .errors import ContractError

Component = Literal["encoder", "update", "policy"]
COMPONENTS = ("encoder", "update", "policy")


@dataclass(frozen=True)
class LayerSpec:
    """Dimensions of one costed layer."""

    kind: str
    kernel: int = 0
    in_channels: int = 0
    out_channels: int = 0
    height: int = 0
    width: int = 0
    bias: bool = False
    elements: int = 0
    per_element: int = 1
    m: int = 0
    k: int = 0
    n: int = 0
    label: str = ""


def layer_flops(spec: LayerSpec) -> int:
    if spec.kind == "conv":
        area = spec.height * spec.width
        total = 2 * spec.kernel * spec.kernel * spec.in_channels * spec.out_channels * area
        if spec.bias:
            total += area * spec.out_channels
        return total
    if spec.kind in ("pointwise", "elementwise", "pool", "gate"):
        return spec.elements * spec.per_element
    if spec.kind == "matmul":
        return 2 * spec.m * spec.k * spec.n
    if spec.kind == "lookup":
        return spec.elements * 7
    raise ContractError(f"Unknown layer kind {spec.kind!r}")


class CostedModel(Protocol):
    def layer_specs(self, component: str, height: int, width: int) -> Sequence[LayerSpec]:
        ...


def total_flops(specs: Iterable[LayerSpec]) -> int:
    return sum(layer_flops(spec) for spec in specs)


def count_flops(
    component: Union[str, LayerSpec],
    model: Optional[CostedModel] = None,
    height: Optional[int] = None,
    width: Optional[int] = None,
) -> int:
    """FLOPs of one layer spec, or of a whole component for an image of ``height × width``."""

    if isinstance(component, LayerSpec):
        return layer_flops(component)
    if component not in COMPONENTS:
        raise ContractError(f"Unknown component {component!r}; expected one of {COMPONENTS} or a LayerSpec")
    if model is None or height is None or width is None:
        raise ContractError(f"Counting {component!r} needs the model and the image size")
    return total_flops(model.layer_specs(component, height, width))


@dataclass(frozen=True)
class FlopsLedger:
    """Per-component costs for one model at one image size."""

    encoder: int
    update: int
    policy: int

    @classmethod
    def for_model(cls, model: CostedModel, height: int, width: int) -> "FlopsLedger":
        return cls(
            encoder=count_flops("encoder", model, height, width),
            update=count_flops("update", model, height, width),
            policy=count_flops("policy", model, height, width),
        )


__all__ = [
    "COMPONENTS",
    "Component",
    "FlopsLedger",
    "LayerSpec",
    "count_flops",
    "layer_flops",
    "total_flops",
]
