"""Minimal dense-tensor math with reverse-mode differentiation."""

from lindit.numerics.gradcheck import grad_check
from lindit.numerics.tensor import (
    DEFAULT_EPS,
    ELEM_TYPES,
    Tape,
    Tensor,
    active_tape,
    add,
    broadcast_to,
    chunk,
    depthwise_conv3x3,
    divide,
    elementwise,
    matmul,
    mean_all,
    mul,
    narrow,
    note_kinks,
    record,
    relu,
    reshape,
    resolve_dtype,
    rmsnorm,
    scale,
    silu,
    sub,
    sum_all,
    tensor,
    transpose,
)

__all__ = [
    "DEFAULT_EPS",
    "ELEM_TYPES",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "broadcast_to",
    "chunk",
    "depthwise_conv3x3",
    "divide",
    "elementwise",
    "grad_check",
    "matmul",
    "mean_all",
    "mul",
    "narrow",
    "note_kinks",
    "record",
    "relu",
    "reshape",
    "resolve_dtype",
    "rmsnorm",
    "scale",
    "silu",
    "sub",
    "sum_all",
    "tensor",
    "transpose",
]
