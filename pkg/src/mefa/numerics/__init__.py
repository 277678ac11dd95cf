"""Minimal dense tensor library with reverse-mode differentiation."""

from .gradcheck import GradCheckReport, GradientProbeError, check_gradient
from .tensor import (
    DegenerateInputError,
    DimensionError,
    Tensor,
    add,
    concat_last_dim,
    cosine_similarity,
    exp,
    grad_enabled,
    log,
    matmul,
    mul,
    no_grad,
    normalize_rows,
    relu,
    reshape,
    slice_rows,
    softmax,
    softplus,
    stack_rows,
    take_rows,
    tanh,
    tmean,
    transpose,
    tsum,
    vstack,
)

__all__ = [
    "DegenerateInputError",
    "DimensionError",
    "GradCheckReport",
    "GradientProbeError",
    "Tensor",
    "add",
    "check_gradient",
    "concat_last_dim",
    "cosine_similarity",
    "exp",
    "grad_enabled",
    "log",
    "matmul",
    "mul",
    "no_grad",
    "normalize_rows",
    "relu",
    "reshape",
    "slice_rows",
    "softmax",
    "softplus",
    "stack_rows",
    "take_rows",
    "tanh",
    "tmean",
    "transpose",
    "tsum",
    "vstack",
]
