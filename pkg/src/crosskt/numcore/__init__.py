"""Differentiable numerical core: tensors, reverse-mode autodiff,
AdamW, and finite-difference gradient checking."""

from .gradcheck import grad_check, relative_error
from .optim import AdamW
from .tensor import (
    Tensor,
    add,
    backward,
    clip,
    concat,
    constant,
    dropout,
    gather_rows,
    log,
    masked_mean,
    matmul,
    mean_all,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    softplus,
    stack,
    sum_all,
    transpose,
)

__all__ = [
    "AdamW",
    "Tensor",
    "add",
    "backward",
    "clip",
    "concat",
    "constant",
    "dropout",
    "gather_rows",
    "grad_check",
    "log",
    "masked_mean",
    "matmul",
    "mean_all",
    "mul",
    "relative_error",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "softplus",
    "stack",
    "sum_all",
    "transpose",
]
