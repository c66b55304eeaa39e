"""Differentiable operations.

Every op takes and returns :class:`Tensor` and records a backward rule on the
active tape. Leading axes are treated as batch axes wherever the docstring
says ``...``; the last axis is always the feature axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from demixkit.autodiff.tensor import Tensor, make_result
from demixkit.errors import DegenerateBatchError, SegmentTooShortError, ShapeError, UsageError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
POOL_EPS = 1e-10


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), "sum")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., k) @ (k, n) -> (..., n)."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T
        gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return make_result(ad @ bd, (a, b), bwd, "matmul")


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Affine map ``x W + b`` with ``b`` of shape (1, Dout) broadcast over rows."""
    if W.data.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {W.shape}")
    if b.shape != (1, W.shape[1]):
        raise ShapeError(f"linear: bias {b.shape} does not fit weight {W.shape}")
    xd, Wd = x.data, W.data

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ Wd.T
        gW = xd.reshape(-1, xd.shape[-1]).T @ g2
        gb = g2.sum(axis=0, keepdims=True)
        return gx, gW, gb

    return make_result(xd @ Wd + b.data[0], (x, W, b), bwd, "linear")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the feature (last) axis."""
    if a.data.ndim != b.data.ndim or a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading dimensions differ {a.shape} vs {b.shape}")
    da = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return make_result(out, (a, b), lambda g: (g[..., :da], g[..., da:]), "concat")


def tdnn_splice(x: Tensor, context: Sequence[int]) -> Tensor:
    """Valid (unpadded) frame splicing over the time axis of (..., T, D).

    Output row ``t`` concatenates input rows ``t - min(context) + offset`` for
    each offset, so ``T' = T - (max(context) - min(context))``.
    """
    context = list(context)
    if not context:
        raise UsageError("tdnn_splice: empty context")
    if x.data.ndim < 2:
        raise ShapeError(f"tdnn_splice: need (..., T, D), got {x.shape}")
    lo, hi = min(context), max(context)
    T, D = x.shape[-2], x.shape[-1]
    t_out = T - (hi - lo)
    if t_out <= 0:
        raise SegmentTooShortError(f"tdnn_splice: {T} frames cannot cover context span {hi - lo}")
    xd = x.data
    if context == [0]:
        out = xd
    else:
        out = np.concatenate([xd[..., o - lo : o - lo + t_out, :] for o in context], axis=-1)

    def bwd(g):
        gx = np.zeros(xd.shape)
        for i, o in enumerate(context):
            gx[..., o - lo : o - lo + t_out, :] += g[..., i * D : (i + 1) * D]
        return (gx,)

    return make_result(out, (x,), bwd, "tdnn_splice")


def crop_time(x: Tensor, start: int, length: int) -> Tensor:
    """Rows ``start:start+length`` of the time axis of (..., T, D)."""
    T = x.shape[-2]
    if start < 0 or length <= 0 or start + length > T:
        raise SegmentTooShortError(f"crop_time: [{start}, {start + length}) outside {T} frames")
    xd = x.data

    def bwd(g):
        gx = np.zeros(xd.shape)
        gx[..., start : start + length, :] = g
        return (gx,)

    return make_result(xd[..., start : start + length, :], (x,), bwd, "crop_time")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def fresh(cls, dim: int) -> "BatchNormState":
        return cls(np.zeros(dim), np.ones(dim))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalisation over every axis except the last.

    In training mode the batch statistics normalise the input and the running
    statistics move towards them (``running = momentum * running + (1 -
    momentum) * batch``, unbiased variance). In eval mode the running
    statistics are used and the op is a per-feature affine map.
    """
    D = x.shape[-1]
    if gamma.shape != (1, D) or beta.shape != (1, D):
        raise ShapeError(f"batch_norm: gamma {gamma.shape}/beta {beta.shape} do not fit features {D}")
    xd = x.data.reshape(-1, D)
    n = xd.shape[0]
    gd, bd = gamma.data[0], beta.data[0]

    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (xd - state.running_mean) * inv
        out = (xhat * gd + bd).reshape(x.shape)

        def bwd_eval(g):
            g2 = g.reshape(-1, D)
            return (
                (g2 * (gd * inv)).reshape(x.shape),
                (g2 * xhat).sum(axis=0, keepdims=True),
                g2.sum(axis=0, keepdims=True),
            )

        return make_result(out, (x, gamma, beta), bwd_eval, "batch_norm")

    if n < 2:
        raise DegenerateBatchError(f"batch_norm: training mode needs at least 2 rows, got {n}")
    mean = xd.mean(axis=0)
    var = xd.var(axis=0)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = (xd - mean) * inv
    out = (xhat * gd + bd).reshape(x.shape)
    state.running_mean = state.momentum * state.running_mean + (1 - state.momentum) * mean
    state.running_var = state.momentum * state.running_var + (1 - state.momentum) * var * (n / (n - 1))

    def bwd(g):
        g2 = g.reshape(-1, D)
        gxhat = g2 * gd
        gx = inv / n * (n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0))
        return (
            gx.reshape(x.shape),
            (g2 * xhat).sum(axis=0, keepdims=True),
            g2.sum(axis=0, keepdims=True),
        )

    return make_result(out, (x, gamma, beta), bwd, "batch_norm")


def stats_pool(x: Tensor) -> Tensor:
    """Mean and standard deviation over the time axis.

    (T, D) -> (1, 2D); (B, T, D) -> (B, 2D). The deviation uses the
    population variance plus 1e-10 under the square root.
    """
    if x.data.ndim < 2:
        raise ShapeError(f"stats_pool: need (..., T, D), got {x.shape}")
    T = x.shape[-2]
    if T < 1:
        raise SegmentTooShortError("stats_pool: empty sequence")
    xd = x.data
    mean = xd.mean(axis=-2, keepdims=True)
    centered = xd - mean
    std = np.sqrt((centered**2).mean(axis=-2, keepdims=True) + POOL_EPS)
    out = np.concatenate([mean, std], axis=-1)
    D = x.shape[-1]
    out = out.reshape(1, 2 * D) if xd.ndim == 2 else out.reshape(xd.shape[:-2] + (2 * D,))

    def bwd(g):
        g = g.reshape(xd.shape[:-2] + (1, 2 * D))
        gm, gs = g[..., :D], g[..., D:]
        return (gm / T + gs * centered / (T * std),)

    return make_result(out, (x,), bwd, "stats_pool")


def mae_loss(pred: Tensor, target: Tensor) -> Tensor:
    _same_shape(pred, target, "mae_loss")
    diff = pred.data - target.data
    n = diff.size

    def bwd(g):
        s = np.sign(diff) * (float(g) / n)
        return s, -s

    return make_result(np.array(np.abs(diff).mean()), (pred, target), bwd, "mae_loss")


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (B, C), got {logits.shape}")
    B, C = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {B} rows")
    if ((labels < 0) | (labels >= C)).any():
        raise UsageError(f"softmax_cross_entropy: label outside [0, {C})")
    logp = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def bwd(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (float(g) / B),)

    return make_result(np.array(loss), (logits,), bwd, "softmax_cross_entropy")
