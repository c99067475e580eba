"""Minimal float64 tensor engine with reverse-mode autodiff."""
from .checkpoint import load_checkpoint, save_checkpoint
from .functional import (
    concat_channels,
    conv2d,
    global_avg_pool,
    instance_norm,
    pointwise,
    relu,
    sigmoid,
    softmax,
    tanh,
)
from .gradcheck import GradcheckResult, gradcheck
from .nn import ConvLayer, Module, Parameter
from .optim import AdamState, Optimizer, optimizer_step
from .tensor import ComputeGraph, Function, Tensor, as_tensor, backward, concat, no_grad

__all__ = [
    "AdamState",
    "ComputeGraph",
    "ConvLayer",
    "Function",
    "GradcheckResult",
    "Module",
    "Optimizer",
    "Parameter",
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "concat_channels",
    "conv2d",
    "global_avg_pool",
    "gradcheck",
    "instance_norm",
    "load_checkpoint",
    "no_grad",
    "optimizer_step",
    "pointwise",
    "relu",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "tanh",
]
