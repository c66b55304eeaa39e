"""Minimal float64 tensor engine with reverse-mode differentiation."""

from demixkit.autodiff.ops import (
    BatchNormState,
    add,
    batch_norm,
    concat,
    crop_time,
    linear,
    log_softmax,
    mae_loss,
    matmul,
    mul,
    relu,
    softmax_cross_entropy,
    stats_pool,
    sub,
    sum_all,
    tdnn_splice,
)
from demixkit.autodiff.optim import Adam, AdamState, adam_step
from demixkit.autodiff.tensor import Tape, Tensor, backward

__all__ = [
    "Adam",
    "AdamState",
    "BatchNormState",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "backward",
    "batch_norm",
    "concat",
    "crop_time",
    "linear",
    "log_softmax",
    "mae_loss",
    "matmul",
    "mul",
    "relu",
    "softmax_cross_entropy",
    "stats_pool",
    "sub",
    "sum_all",
    "tdnn_splice",
]
