"""Minimal dense tensors with tape-based reverse-mode differentiation."""

from . import ops
from .ops import (  # noqa: F401
    sum,
    add,
    as_tensor,
    batch_norm,
    broadcast_to,
    concat,
    cross_entropy,
    detach,
    div,
    exp,
    gather_rows,
    gelu,
    layer_norm,
    log,
    matmul,
    mean,
    mul,
    reshape,
    slice_axis,
    softmax_lastdim,
    square,
    sub,
    topk_stable,
    transpose,
)
from .tensor import (
    DimensionError,
    NonFiniteError,
    Parameter,
    Tape,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    get_default_dtype,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "DimensionError", "NonFiniteError", "Parameter", "Tape", "Tensor", "add", "as_tensor",
    "backward", "batch_norm", "broadcast_to", "concat", "cross_entropy", "current_tape",
    "default_dtype", "detach", "div", "exp", "gather_rows", "gelu", "get_default_dtype",
    "layer_norm", "log", "matmul", "mean", "mul", "no_grad", "ops", "reshape",
    "set_default_dtype", "slice_axis", "softmax_lastdim", "square", "sub", "sum", "topk_stable",
    "transpose",
]
