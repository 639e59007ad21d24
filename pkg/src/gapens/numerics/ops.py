"""Differentiable operations.  Each op computes its forward value with numpy
and registers a closure mapping the output adjoint to input adjoints."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import (
    BatchTooSmall,
    EmptyInput,
    IndexOutOfRange,
    InvalidBounds,
    NonPositiveSigma,
    ShapeMismatch,
)
from .tensor import DTYPE, Tensor, as_tensor, make_result


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _check_ids(ids, upper: int, what: str) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= upper):
        raise IndexOutOfRange(f"{what} must lie in [0, {upper}), got range [{ids.min()}, {ids.max()}]")
    return ids


# --- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return make_result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return make_result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return make_result(x.data * c, "scale", (x,), lambda g: (g * c,))


def mul_scalar(x, s) -> Tensor:
    """Multiply every entry of ``x`` by the one-element tensor ``s``."""
    x, s = as_tensor(x), as_tensor(s)
    if s.size != 1:
        raise ShapeMismatch(f"mul_scalar expects a one-element scale, got {s.shape}")
    sv = s.data.reshape(())
    xd = x.data

    def bw(g):
        return g * sv, np.sum(g * xd).reshape(s.shape)

    return make_result(xd * sv, "mul_scalar", (x, s), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), "relu", (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result(np.logaddexp(0.0, xd), "softplus", (x,), lambda g: (g * _sigmoid(xd),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return make_result(y, "exp", (x,), lambda g: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_result(np.log(xd), "log", (x,), lambda g: (g / xd,))


def clamp(x, lo: float, hi: float) -> Tensor:
    if not lo <= hi:
        raise InvalidBounds(f"clamp bounds lo={lo} > hi={hi}")
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return make_result(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


# --- reductions and reshaping -------------------------------------------


def sum(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape
    return make_result(np.sum(x.data), "sum", (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def sum_rows(x) -> Tensor:
    """Row sums of a matrix: ``[n, k] -> [n]``."""
    x = as_tensor(x)
    k = x.shape[1]
    return make_result(x.data.sum(axis=1), "sum_rows", (x,), lambda g: (np.repeat(g[:, None], k, axis=1),))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_result(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"concat_cols: {a.shape} vs {b.shape}")
    k = a.shape[1]
    return make_result(np.concatenate([a.data, b.data], axis=1), "concat_cols", (a, b), lambda g: (g[:, :k], g[:, k:]))


# --- linear algebra --------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, "matmul", (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_rowvec(x, b) -> Tensor:
    """Add the vector ``b`` of length ``d`` to every row of ``x`` (``[n, d]``)."""
    x, b = as_tensor(x), as_tensor(b)
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeMismatch(f"add_rowvec: {x.shape} + {b.shape}")
    return make_result(x.data + b.data, "add_rowvec", (x, b), lambda g: (g, g.sum(axis=0)))


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add_rowvec(y, b)


def bmm(a, b) -> Tensor:
    """Batched matrix product ``[G, p, q] @ [G, q, r]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeMismatch(f"bmm: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_result(
        ad @ bd, "bmm", (a, b), lambda g: (g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g)
    )


# --- graph scatter / gather -----------------------------------------------


def segment_sum(values, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``values`` sharing a segment id.  Empty segments are zero."""
    values = as_tensor(values)
    ids = _check_ids(segment_ids, num_segments, "segment_ids")
    if ids.shape[0] != values.shape[0]:
        raise ShapeMismatch(f"segment_sum: {ids.shape[0]} ids for {values.shape[0]} rows")
    out = np.zeros((num_segments,) + values.shape[1:], dtype=DTYPE)
    np.add.at(out, ids, values.data)
    return make_result(out, "segment_sum", (values,), lambda g: (g[ids],))


def embedding_lookup(table, codes) -> Tensor:
    """Gather rows of ``table``; repeated codes accumulate in the adjoint."""
    table = as_tensor(table)
    ids = _check_ids(codes, table.shape[0], "codes")
    shape = table.shape

    def bw(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, ids, g)
        return (gt,)

    return make_result(table.data[ids], "embedding_lookup", (table,), bw)


gather_rows = embedding_lookup


def segment_outer(a, b, segment_ids, num_segments: int) -> Tensor:
    """Per segment ``s``: sum over rows i in s of ``outer(a[i], b[i])`` -> ``[S, p, q]``.

    With ``a = S`` (assignments) and ``b = h`` this is ``S^T h`` per graph.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeMismatch(f"segment_outer: {a.shape} vs {b.shape}")
    ids = _check_ids(segment_ids, num_segments, "segment_ids")
    ad, bd = a.data, b.data
    out = np.zeros((num_segments, ad.shape[1], bd.shape[1]), dtype=DTYPE)
    np.add.at(out, ids, ad[:, :, None] * bd[:, None, :])

    def bw(g):
        gi = g[ids]
        return np.einsum("npq,nq->np", gi, bd), np.einsum("npq,np->nq", gi, ad)

    return make_result(out, "segment_outer", (a, b), bw)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return make_result(y, "softmax_rows", (x,), bw)


# --- losses ----------------------------------------------------------------


def l1_loss(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("l1_loss", pred, target)
    n = pred.size
    if n == 0:
        raise EmptyInput("l1_loss on empty vectors")
    diff = pred.data - target.data
    sign = np.sign(diff)
    return make_result(np.mean(np.abs(diff)), "l1_loss", (pred, target), lambda g: (g * sign / n, -g * sign / n))


def kl_gaussian(mu, sigma, prior_sigma: float) -> Tensor:
    """KL( N(mu, sigma^2) || N(0, prior_sigma^2) ) summed over all entries."""
    mu, sigma = as_tensor(mu), as_tensor(sigma)
    _same_shape("kl_gaussian", mu, sigma)
    if prior_sigma <= 0 or np.any(sigma.data <= 0):
        raise NonPositiveSigma("kl_gaussian needs sigma > 0 and prior_sigma > 0")
    m, s = mu.data, sigma.data
    p2 = prior_sigma * prior_sigma
    val = np.sum(np.log(prior_sigma / s) + (s * s + m * m) / (2.0 * p2) - 0.5)
    return make_result(val, "kl_gaussian", (mu, sigma), lambda g: (g * m / p2, g * (s / p2 - 1.0 / s)))


# --- normalization / regularization ---------------------------------------


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm site (not trainable)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, dim: int) -> "BatchNormState":
        return cls(np.zeros(dim, dtype=DTYPE), np.ones(dim, dtype=DTYPE))


def batch_norm(x, weight, bias, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over rows.

    Training mode normalizes with the biased batch variance and updates the
    running statistics in place; eval mode uses the running statistics.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    n = x.shape[0]
    if training and n < 2:
        raise BatchTooSmall(f"batch_norm in train mode needs >= 2 rows, got {n}")
    if n < 1:
        raise BatchTooSmall("batch_norm on an empty batch")
    gamma, beta = weight.data, bias.data

    if training:
        mean = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mean
        state.running_var = (1.0 - m) * state.running_var + m * var
    else:
        mean, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma + beta

    def bw(g):
        dgamma = np.sum(g * xhat, axis=0)
        dbeta = np.sum(g, axis=0)
        dxhat = g * gamma
        if training:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return make_result(out, "batch_norm", (x, weight, bias), bw)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))
