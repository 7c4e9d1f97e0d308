from .tensor import Tape, Tensor, active_tape, backward, default_dtype, precision
from . import ops
from .ops import (
    absolute,
    add,
    concat_rows,
    constant,
    gather_rows,
    gather_rows_batched,
    gelu,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    softmax,
    stop_gradient,
    sub,
    transpose,
)
from .optim import AdamW, cosine_warmup_lr

__all__ = [
    "AdamW",
    "Tape",
    "Tensor",
    "absolute",
    "active_tape",
    "add",
    "backward",
    "concat_rows",
    "constant",
    "cosine_warmup_lr",
    "default_dtype",
    "gather_rows",
    "gather_rows_batched",
    "gelu",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "ops",
    "precision",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "scale",
    "softmax",
    "stop_gradient",
    "sub",
    "transpose",
]
