"""Differentiable operations on :class:`Tensor`.

Elementwise binary ops follow numpy broadcasting; the backward pass sums the
gradient back down to each operand's shape. Reductions, softmax and
log-sum-exp subtract the running max before exponentiating.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import (
    ConfigurationError,
    DegenerateInputError,
    ShapeError,
    Tensor,
    as_tensor,
)

LAYER_NORM_EPS = 1e-5


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._from_op(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return Tensor._from_op(a.data * c, (a,), backward, "scale")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return Tensor._from_op(out, (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return Tensor._from_op(out, (a,), backward, "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(a.data * mask, (a,), backward, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return Tensor._from_op(out, (a,), backward, "gelu")


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes with numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(a.data @ b.data, (a, b), backward, "matmul")


# -- shape manipulation -------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(g):
        return (g.reshape(a.shape),)

    return Tensor._from_op(a.data.reshape(tuple(shape)), (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return Tensor._from_op(np.transpose(a.data, axes), (a,), backward, "transpose")


def index(a: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        raise TypeError("index with numpy arrays or ints, not Tensors")
    out = np.array(a.data[idx], dtype=np.float64)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(out, (a,), backward, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=axis),
                           tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._from_op(np.stack([t.data for t in tensors], axis=axis),
                           tensors, backward, "stack")


# -- reductions ---------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)),)

    return Tensor._from_op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.size(out), 1)

    def backward(g):
        return (np.array(_expand_reduced(g, a.shape, axis, keepdims)) / count,)

    return Tensor._from_op(out, (a,), backward, "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward, "softmax")


def log_sum_exp(a: Tensor, axis: int | None = -1, keepdims: bool = False) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    probs = e / s
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())

    def backward(g):
        g = np.array(_expand_reduced(g, a.shape, axis, keepdims))
        return (g * probs,)

    return Tensor._from_op(out, (a,), backward, "log_sum_exp")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward, "log_softmax")


# -- normalization ------------------------------------------------------------

def standardize(h: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """(h - mean) / sqrt(var + eps) over the last axis, without affine terms."""
    if eps < 0:
        raise ConfigurationError(f"eps must be non-negative, got {eps}")
    mu = h.data.mean(axis=-1, keepdims=True)
    centered = h.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_sigma = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_sigma

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv_sigma * (g - gm - xhat * gx),)

    return Tensor._from_op(xhat, (h,), backward, "standardize")


def layer_norm(h: Tensor, gamma, beta, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-position layer normalization over the last axis.

    ``gamma`` and ``beta`` broadcast against ``h``; a per-sample scale of shape
    ``(B, 1, D)`` is how speaker-conditioned normalization plugs in.
    """
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if gamma.shape[-1] != h.shape[-1] or beta.shape[-1] != h.shape[-1]:
        raise ShapeError(
            f"layer_norm: feature dim {h.shape[-1]} vs gamma {gamma.shape} / beta {beta.shape}")
    return add(mul(standardize(h, eps), gamma), beta)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("cannot normalize a zero-norm vector")
    out = a.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return Tensor._from_op(out, (a,), backward, "l2_normalize")


def cosine_similarity(a, b) -> Tensor:
    """a.b / (|a||b|) for two vectors of equal length, as a scalar tensor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_similarity expects equal 1-D shapes, got {a.shape}, {b.shape}")
    na = float(np.sqrt(a.data @ a.data))
    nb = float(np.sqrt(b.data @ b.data))
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity undefined for a zero-norm vector")
    dot = float(a.data @ b.data)
    out = dot / (na * nb)

    def backward(g):
        ga = g * (b.data / (na * nb) - out * a.data / na ** 2)
        gb = g * (a.data / (na * nb) - out * b.data / nb ** 2)
        return ga, gb

    return Tensor._from_op(np.array(out), (a, b), backward, "cosine_similarity")


# -- convolution --------------------------------------------------------------

def conv1d_grouped(h: Tensor, kernel: Tensor, groups: int = 1) -> Tensor:
    """Grouped 1-D cross-correlation along time with zero "same" padding.

    ``h`` is ``(..., T, C_in)`` (time-major, channels last). ``kernel`` is
    ``(C_out, C_in // groups, k)`` shared by every leading index, or
    ``(B, C_out, C_in // groups, k)`` with one kernel per sample of a
    ``(B, T, C_in)`` input. Output channel ``o`` reads input group
    ``o // (C_out // groups)``.
    """
    h, kernel = as_tensor(h), as_tensor(kernel)
    per_sample = kernel.ndim == 4
    if kernel.ndim not in (3, 4):
        raise ShapeError(f"kernel must be 3-D or 4-D, got {kernel.shape}")
    if per_sample and (h.ndim != 3 or h.shape[0] != kernel.shape[0]):
        raise ShapeError(f"per-sample kernel {kernel.shape} needs (B, T, C) input, got {h.shape}")
    c_in = h.shape[-1]
    c_out, c_in_g, k = kernel.shape[-3:]
    if groups < 1 or c_in % groups or c_out % groups:
        raise ConfigurationError(
            f"channels ({c_in} in, {c_out} out) must be divisible by groups={groups}")
    if c_in // groups != c_in_g:
        raise ShapeError(f"kernel expects {c_in_g} channels per group, input gives {c_in // groups}")
    if k % 2 != 1:
        raise ConfigurationError(f"kernel size must be odd, got {k}")

    T = h.shape[-2]
    pad = k // 2
    lead = h.shape[:-2]
    c_out_g = c_out // groups
    padded = np.zeros(lead + (T + 2 * pad, c_in))
    padded[..., pad:pad + T, :] = h.data
    # windows[..., t, j, g, c] = padded[..., t + j, g * c_in_g + c]
    windows = np.stack([padded[..., j:j + T, :] for j in range(k)], axis=-2)
    windows = windows.reshape(lead + (T, k, groups, c_in_g))
    if per_sample:
        w = kernel.data.reshape(kernel.shape[0], groups, c_out_g, c_in_g, k)
        out = np.einsum("btjgc,bgocj->btgo", windows, w)
    else:
        w = kernel.data.reshape(groups, c_out_g, c_in_g, k)
        out = np.einsum("...tjgc,gocj->...tgo", windows, w)
    out = out.reshape(lead + (T, c_out))

    def backward(g):
        g = g.reshape(lead + (T, groups, c_out_g))
        if per_sample:
            gw = np.einsum("btjgc,btgo->bgocj", windows, g).reshape(kernel.shape)
            gwin = np.einsum("btgo,bgocj->btjgc", g, w)
        else:
            gw = np.einsum("ntjgc,ntgo->gocj", windows.reshape((-1,) + windows.shape[-4:]),
                           g.reshape((-1,) + g.shape[-3:])).reshape(kernel.shape)
            gwin = np.einsum("...tgo,gocj->...tjgc", g, w)
        gwin = gwin.reshape(lead + (T, k, c_in))
        gpad = np.zeros(lead + (T + 2 * pad, c_in))
        for j in range(k):
            gpad[..., j:j + T, :] += gwin[..., j, :]
        return gpad[..., pad:pad + T, :], gw

    return Tensor._from_op(out, (h, kernel), backward, "conv1d_grouped")
