from .engine import (
    LAYERNORM_EPS,
    NonFiniteError,
    NumericsError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    concat,
    default_dtype,
    forward_op,
    gelu,
    index,
    layernorm,
    matmul,
    mul,
    precision,
    reshape,
    set_default_dtype,
    softmax,
    sub,
    supported_ops,
    tmean,
    transpose,
    tsum,
)
from .gradcheck import grad_check, grad_check_params
from .serialize import SerializationError, load_tensors, save_tensors

__all__ = [
    "LAYERNORM_EPS",
    "NonFiniteError",
    "NumericsError",
    "SerializationError",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "concat",
    "default_dtype",
    "forward_op",
    "gelu",
    "grad_check",
    "grad_check_params",
    "index",
    "layernorm",
    "load_tensors",
    "matmul",
    "mul",
    "precision",
    "reshape",
    "save_tensors",
    "set_default_dtype",
    "softmax",
    "sub",
    "supported_ops",
    "tmean",
    "transpose",
    "tsum",
]
