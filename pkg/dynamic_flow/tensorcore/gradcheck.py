"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradcheckResult:
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def relative_error(self) -> float:
        scale = max(float(np.linalg.norm(self.analytic)), float(np.linalg.norm(self.numeric)), 1e-12)
        return float(np.linalg.norm(self.analytic - self.numeric)) / scale


def gradcheck(
    loss_fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    *,
    eps: float = 1e-4,
    samples_per_input: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradcheckResult:
    """Compare analytic gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the graph from the current ``.data`` of
    ``inputs`` on every call. With ``samples_per_input`` only that many
    randomly chosen entries of each input are perturbed.
    """

    for tensor in inputs:
        tensor.grad = None
    backward(loss_fn(), inputs)
    rng = rng or np.random.default_rng(0)

    analytic: List[float] = []
    numeric: List[float] = []
    for tensor in inputs:
        flat_grad = tensor.grad.reshape(-1)
        indices = np.arange(tensor.size)
        if samples_per_input is not None and samples_per_input < tensor.size:
            indices = np.sort(rng.choice(tensor.size, size=samples_per_input, replace=False))
        for index in indices:
            original = tensor.data.reshape(-1)[index]
            tensor.data.reshape(-1)[index] = original + eps
            plus = loss_fn().item()
            tensor.data.reshape(-1)[index] = original - eps
            minus = loss_fn().item()
            tensor.data.reshape(-1)[index] = original
            numeric.append((plus - minus) / (2 * eps))
            analytic.append(float(flat_grad[index]))
    return GradcheckResult(analytic=np.asarray(analytic), numeric=np.asarray(numeric))


__all__ = ["GradcheckResult", "gradcheck"]
