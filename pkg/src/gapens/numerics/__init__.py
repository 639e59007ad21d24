from .ops import (
    BatchNormState,
    add,
    add_rowvec,
    batch_norm,
    bmm,
    clamp,
    concat_cols,
    dropout,
    embedding_lookup,
    exp,
    gather_rows,
    kl_gaussian,
    l1_loss,
    linear,
    log,
    matmul,
    mul,
    mul_scalar,
    relu,
    reshape,
    scale,
    segment_outer,
    segment_sum,
    softmax_rows,
    softplus,
    sub,
    sum,
    sum_rows,
)
from .optim import AdamState, adam_step
from .tensor import Tape, Tensor, as_tensor, backward, get_tape, grad, no_grad, reset_tape

__all__ = [
    "AdamState",
    "BatchNormState",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "add_rowvec",
    "as_tensor",
    "backward",
    "batch_norm",
    "bmm",
    "clamp",
    "concat_cols",
    "dropout",
    "embedding_lookup",
    "exp",
    "gather_rows",
    "get_tape",
    "grad",
    "kl_gaussian",
    "l1_loss",
    "linear",
    "log",
    "matmul",
    "mul",
    "mul_scalar",
    "no_grad",
    "relu",
    "reset_tape",
    "reshape",
    "scale",
    "segment_outer",
    "segment_sum",
    "softmax_rows",
    "softplus",
    "sub",
    "sum",
    "sum_rows",
]
