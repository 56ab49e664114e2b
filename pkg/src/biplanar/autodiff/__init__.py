"""Small reverse-mode autodiff library on numpy arrays."""
from .tensor import (
    Tensor, as_tensor, check_finite, concat, default_dtype, exp, get_default_dtype,
    leaky_relu, log, matmul, no_grad, select, set_default_dtype, sigmoid, softmax,
)
from . import functional
from .nn import Conv2d, ConvBlock, GroupNorm, Module, SelfAttention
from .optim import Adam, AdamState, adam_step
from .gradcheck import GradCheckReport, grad_check
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "as_tensor", "check_finite", "concat", "default_dtype", "exp", "get_default_dtype",
    "leaky_relu", "log", "matmul", "no_grad", "select", "set_default_dtype", "sigmoid", "softmax",
    "functional", "Conv2d", "ConvBlock", "GroupNorm", "Module", "SelfAttention",
    "Adam", "AdamState", "adam_step", "GradCheckReport", "grad_check",
    "load_checkpoint", "save_checkpoint",
]
