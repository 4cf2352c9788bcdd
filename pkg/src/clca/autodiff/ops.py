"""Differentiable kernels.

Every kernel computes its output with numpy, checks it is finite, and, when a
tape is active and an input requires a gradient, records a closure that maps
the output gradient to input gradients.

Broadcasting is deliberately narrow: a binary elementwise op accepts operands
whose shapes are equal or where one shape is a suffix of the other (leading
batch dimensions). Anything else must go through :func:`broadcast_to` or
:func:`reshape` explicitly.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import DimensionError, NonFiniteError, Tensor, current_tape

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite values in output")


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(op, out)
    tape = current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs_grad, dtype=out.dtype)
    if needs_grad:
        tape.record(op, inputs, result, backward_fn)
    return result


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient over broadcast leading axes back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_suffix(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, long_ = (sb, sa) if len(sb) <= len(sa) else (sa, sb)
    if len(short) == 0 or long_[len(long_) - len(short):] == short:
        return
    raise DimensionError(f"{op}: shapes {sa} and {sb} are not equal or suffix-broadcastable")


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_suffix("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_sum_to(g, sa), _sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_suffix("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_sum_to(g, sa), -_sum_to(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_suffix("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _sum_to(g * bd, ad.shape), _sum_to(g * ad, bd.shape)

    return _emit("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_suffix("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _sum_to(g / bd, ad.shape), _sum_to(-g * out / bd, bd.shape)

    return _emit("div", out, (a, b), bw)


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", xd * xd, (x,), lambda g: (2.0 * xd * g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return _emit("log", out, (x,), lambda g: (g / xd,))


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path."""
    return Tensor(x.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# reductions and shape plumbing

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[a] for a in axes]))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("mean", np.asarray(out), (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _emit("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", out, (x,), lambda g: (np.transpose(g, inverse),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    old = x.shape
    if len(old) != len(shape):
        raise DimensionError(f"broadcast_to: rank mismatch {old} -> {shape}; reshape first")
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"broadcast_to: cannot broadcast {old} to {shape}") from exc
    return _emit("broadcast_to", out, (x,), lambda g: (_sum_to(g, old),))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    shape = x.shape
    axis = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index].copy()

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _emit("slice", out, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: empty input list")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise DimensionError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * ndim
            index[axis] = slice(int(lo), int(hi))
            parts.append(g[tuple(index)])
        return parts

    return _emit("concat", out, tensors, bw)


def gather_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Per-sample gather along axis 1: ``out[b, j] = x[b, index[b, j]]``."""
    index = np.asarray(index, dtype=np.int64)
    if x.ndim < 2 or index.ndim != 2 or index.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows: x {x.shape} with index {index.shape}")
    if index.size and (index.min() < 0 or index.max() >= x.shape[1]):
        raise IndexError("gather_rows: index out of range")
    shape = x.shape
    rows = np.arange(shape[0])[:, None]
    out = x.data[rows, index]

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (rows, index), g)
        return (full,)

    return _emit("gather_rows", out, (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(
            f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast"
        ) from exc
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _sum_to(ga, ad.shape),
            None if gb is None else _sum_to(gb, bd.shape),
        )

    return _emit("matmul", out, (a, b), bw)


# ---------------------------------------------------------------------------
# nonlinearities and normalisation

def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] == 0:
        raise DimensionError(f"softmax: empty last dimension in shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", y, (x,), bw)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF via erf."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return _emit("gelu", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: width {d} vs gamma {gamma.shape} / beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data
    lead = tuple(range(xd.ndim - 1))

    def bw(g):
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", out, (x, gamma, beta), bw)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over ``(B, S)`` for input ``[B, C, S]``.

    In training mode the running statistics are updated in place
    (``running = (1 - momentum) * running + momentum * batch``, unbiased
    variance); in eval mode only the running statistics are used.
    """
    if x.ndim != 3:
        raise DimensionError(f"batch_norm: expected [B, C, S], got {x.shape}")
    b, c, s = x.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise DimensionError(f"batch_norm: {c} channels vs scale {scale.shape}")
    xd = x.data
    gam = scale.data[None, :, None]
    if training:
        n = b * s
        if n < 1:
            raise DimensionError("batch_norm: empty batch")
        mu = xd.mean(axis=(0, 2), keepdims=True)
        centered = xd - mu
        var = (centered * centered).mean(axis=(0, 2), keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = centered * rstd
        unbiased = var.reshape(c) * (n / (n - 1)) if n > 1 else var.reshape(c)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased

        def bw(g):
            dxhat = g * gam
            dx = rstd * (
                dxhat
                - dxhat.mean(axis=(0, 2), keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=(0, 2), keepdims=True)
            )
            return dx, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))
    else:
        rstd = (1.0 / np.sqrt(running_var + eps)).astype(xd.dtype)[None, :, None]
        xhat = (xd - running_mean.astype(xd.dtype)[None, :, None]) * rstd

        def bw(g):
            return g * gam * rstd, (g * xhat).sum(axis=(0, 2)), g.sum(axis=(0, 2))

    out = xhat * gam + shift.data[None, :, None]
    return _emit("batch_norm", out.astype(xd.dtype, copy=False), (x, scale, shift), bw)


def cross_entropy(logits: Tensor, labels: np.ndarray, label_smoothing: float = 0.0) -> Tensor:
    """Mean softmax cross-entropy over the batch."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy: expected [B, C], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: labels {labels.shape} for logits {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    target = np.full((b, c), label_smoothing / c, dtype=logits.dtype)
    target[np.arange(b), labels] += 1.0 - label_smoothing
    loss = -(target * logp).sum() / b

    def bw(g):
        return (g * (np.exp(logp) - target) / b,)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# non-differentiable selection

def topk_stable(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ascending; ties go to the lower index."""
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores).reshape(-1)
    n = s.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"topk_stable: k={k} outside [1, {n}]")
    # stable sort on -score keeps the original order among equal scores
    order = np.argsort(-s, kind="stable")
    return np.sort(order[:k])
