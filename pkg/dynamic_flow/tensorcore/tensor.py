"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a :class:`Function` subclass. Applying a
function records it as a node of the compute graph; nodes carry a sequence
number taken at creation time, so the insertion order of the graph is a valid
topological order and :func:`backward` simply walks it in reverse.
"""
from __future__ import annotations

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..errors import ContractError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]

DTYPE = np.float64

_sequence = itertools.count()
_local = threading.local()


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, detached targets)."""

    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def is_grad_enabled() -> bool:
    # per thread
    return getattr(_local, "grad_enabled", True)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` over the axes numpy broadcasting expanded to reach ``shape``."""

    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """A recorded operation: forward on arrays, backward to input gradients."""

    def __init__(self, *inputs: "Tensor") -> None:
        self.inputs = inputs
        self.seq = next(_sequence)
        self.output: Optional["Tensor"] = None

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} does not implement forward")

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        raise NotImplementedError(f"{type(self).__name__} does not implement backward")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        if not requires_grad:
            return Tensor(out_data, requires_grad=False)
        out = Tensor(out_data, requires_grad=True, creator=func)
        func.output = out
        return out


class Tensor:
    """A dense float64 array that optionally tracks gradients."""

    __array_priority__ = 100

    def __init__(
        self,
        data: ArrayLike,
        *,
        requires_grad: bool = False,
        creator: Optional[Function] = None,
        name: Optional[str] = None,
    ) -> None:
        self.data = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
        self.requires_grad = requires_grad
        self.creator = creator
        self.grad: Optional[np.ndarray] = None
        self.name = name

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # ------------------------------------------------------------------
    # Arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other: Union["Tensor", float]) -> "Tensor":
        return Add.apply(self, as_tensor(other))

    def __radd__(self, other: float) -> "Tensor":
        return Add.apply(as_tensor(other), self)

    def __sub__(self, other: Union["Tensor", float]) -> "Tensor":
        return Sub.apply(self, as_tensor(other))

    def __rsub__(self, other: float) -> "Tensor":
        return Sub.apply(as_tensor(other), self)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        return Mul.apply(self, as_tensor(other))

    def __rmul__(self, other: float) -> "Tensor":
        return Mul.apply(as_tensor(other), self)

    def __truediv__(self, other: Union["Tensor", float]) -> "Tensor":
        return Div.apply(self, as_tensor(other))

    def __neg__(self) -> "Tensor":
        return Neg.apply(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return MatMul.apply(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return Index.apply(self, index=index)

    # ------------------------------------------------------------------
    # Shape and reductions
    # ------------------------------------------------------------------
    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def abs(self) -> "Tensor":
        return Abs.apply(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------
class Add(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a + b

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a - b

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        a, b = self.inputs
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a * b

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        a, b = self.inputs
        return unbroadcast(grad * b.data, a.shape), unbroadcast(grad * a.data, b.shape)


class Div(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return a / b

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        a, b = self.inputs
        grad_a = grad / b.data
        grad_b = -grad * a.data / (b.data * b.data)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


class Neg(Function):
    def forward(self, a: np.ndarray) -> np.ndarray:
        return -a

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (-grad,)


class Abs(Function):
    # d|x|/dx at 0 is taken as 0
    def forward(self, a: np.ndarray) -> np.ndarray:
        return np.abs(a)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad * np.sign(self.inputs[0].data),)


class MatMul(Function):
    """Batched matrix product over the last two axes."""

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul cannot combine shapes {a.shape} and {b.shape}")
        return np.matmul(a, b)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        a, b = self.inputs
        grad_a = np.matmul(grad, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), grad)
        return unbroadcast(grad_a, a.shape), unbroadcast(grad_b, b.shape)


# ----------------------------------------------------------------------
# Shape manipulation and reductions
# ----------------------------------------------------------------------
class Reshape(Function):
    def forward(self, a: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        return a.reshape(shape)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (grad.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a: np.ndarray, axes: Tuple[int, ...]) -> np.ndarray:
        self.axes = axes or tuple(reversed(range(a.ndim)))
        return np.ascontiguousarray(np.transpose(a, self.axes))

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return (np.transpose(grad, np.argsort(self.axes)),)


class Index(Function):
    def forward(self, a: np.ndarray, index: Any) -> np.ndarray:
        self.index = index
        return np.array(a[index], dtype=DTYPE)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        full = np.zeros_like(self.inputs[0].data)
        np.add.at(full, self.index, grad)
        return (full,)


class Sum(Function):
    def forward(self, a: np.ndarray, axis: Any, keepdims: bool) -> np.ndarray:
        self.axis, self.keepdims = axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    def forward(self, a: np.ndarray, axis: Any, keepdims: bool) -> np.ndarray:
        self.axis, self.keepdims = axis, keepdims
        reduced = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
        self.count = reduced
        return np.asarray(a.mean(axis=axis, keepdims=keepdims))

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        shape = self.inputs[0].shape
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, shape).copy(),)


class Concat(Function):
    def forward(self, *arrays: np.ndarray, axis: int) -> np.ndarray:
        self.axis = axis
        self.splits = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:
        return tuple(np.split(grad, self.splits, axis=self.axis))


# ----------------------------------------------------------------------
# Graph traversal
# ----------------------------------------------------------------------
@dataclass
class ComputeGraph:
    """The recorded operations reachable from one output, in insertion order."""

    nodes: List[Function] = field(default_factory=list)

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeGraph":
        seen: Dict[int, Function] = {}
        stack: List[Function] = [output.creator] if output.creator is not None else []
        while stack:
            func = stack.pop()
            if func.seq in seen:
                continue
            seen[func.seq] = func
            for tensor in func.inputs:
                if tensor.creator is not None and tensor.requires_grad and tensor.creator.seq not in seen:
                    stack.append(tensor.creator)
        return cls(nodes=[seen[key] for key in sorted(seen)])

    def run_backward(self, output: Tensor, seed: np.ndarray) -> None:
        pending: Dict[int, np.ndarray] = {id(output): seed}
        for func in reversed(self.nodes):
            out = func.output
            grad = pending.pop(id(out), None) if out is not None else None
            if grad is None:
                continue
            input_grads = func.backward(grad)
            for tensor, tensor_grad in zip(func.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                if tensor.creator is None:
                    tensor.grad = tensor_grad.copy() if tensor.grad is None else tensor.grad + tensor_grad
                else:
                    key = id(tensor)
                    pending[key] = tensor_grad if key not in pending else pending[key] + tensor_grad


def backward(loss: Tensor, parameters: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    When ``parameters`` is given, any of them the loss does not reach ends up
    with an all-zero gradient instead of ``None``.
    """

    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss.creator is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    else:
        graph = ComputeGraph.from_output(loss)
        logger.debug("Running backward", extra={"nodes": len(graph.nodes)})
        graph.run_backward(loss, np.ones_like(loss.data))
    if parameters is not None:
        for param in parameters:
            if param.grad is None:
                param.zero_grad()


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one tensor")
    return Concat.apply(*parts, axis=axis)


__all__ = [
    "ComputeGraph",
    "DTYPE",
    "Function",
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "is_grad_enabled",
    "no_grad",
    "unbroadcast",
]
