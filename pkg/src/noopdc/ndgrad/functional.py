"""Differentiable primitives.

Each function takes Tensors (or array-likes for constant operands), computes
the forward result with numpy and registers a backward closure through
``make_op``. Saved activations are only kept when some input needs them.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_op


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


def _operands(a, b, dtype_from=None):
    a_t = a if isinstance(a, Tensor) else None
    b_t = b if isinstance(b, Tensor) else None
    ref = a_t if a_t is not None else b_t
    dt = ref.dtype if ref is not None else None
    return as_tensor(a, dtype=dt), as_tensor(b, dtype=dt)


# -- elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = _unbroadcast(g / bd, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op("div", out, (a, b), bw)


def scale(x: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar."""
    s = float(s)
    return make_op("scale", x.data * x.dtype.type(s), (x,), lambda g: (g * g.dtype.type(s),))


def shift(x: Tensor, s: float) -> Tensor:
    """Add a python scalar."""
    return make_op("shift", x.data + x.dtype.type(s), (x,), lambda g: (g,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            gx = np.where(out > 0, g / (2 * np.where(out > 0, out, 1)), 0)
        return (gx.astype(x.dtype, copy=False),)

    return make_op("sqrt", out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xd)
    return make_op("log", out, (x,), lambda g: (g / xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_op("relu", np.where(mask, x.data, 0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1 / (1 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1 + e)
    return out


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    xd = x.data

    def bw(g):
        return (g * (s * (1 + xd * (1 - s))),)

    return make_op("silu", xd * s, (x,), bw)


# -- shape ----------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def repeat(x: Tensor, n: int, axis: int = 0) -> Tensor:
    """Repeat each slice along ``axis`` n times (numpy.repeat semantics)."""
    ax = axis % x.ndim
    src = x.shape

    def bw(g):
        shp = src[:ax] + (src[ax], n) + src[ax + 1:]
        return (g.reshape(shp).sum(axis=ax + 1),)

    return make_op("repeat", np.repeat(x.data, n, axis=ax), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: shape mismatch {t.shape} vs {ref}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if x.ndim != 4:
        raise ValueError(f"upsample2x expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_op("upsample2x", out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


# -- reductions -----------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, shape: tuple, axes: tuple, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def bw(g):
        return (np.ascontiguousarray(_expand(g, shape, axes, keepdims)),)

    return make_op("sum", np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape

    def bw(g):
        return (np.ascontiguousarray(_expand(g, shape, axes, keepdims)) / g.dtype.type(count),)

    return make_op("mean", np.asarray(x.data.mean(axis=axes, keepdims=keepdims)), (x,), bw)


def sqdiff_sum(a, b, axis=None, keepdims: bool = False) -> Tensor:
    """sum((a - b)**2) over ``axis`` with broadcasting between a and b."""
    a, b = _operands(a, b)
    _check_broadcast("sqdiff_sum", a, b)
    diff = a.data - b.data
    axes = _norm_axes(axis, diff.ndim)
    shape = diff.shape

    def bw(g):
        d = 2 * _expand(g, shape, axes, keepdims) * diff
        ga = _unbroadcast(d, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-d, b.shape) if b.requires_grad else None
        return ga, gb

    out = np.asarray((diff * diff).sum(axis=axes, keepdims=keepdims))
    return make_op("sqdiff_sum", out, (a, b), bw)


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    xd = x.data
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s

    def bw(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * soft,)

    return make_op("logsumexp", out if keepdims else np.squeeze(out, axis=axis), (x,), bw)


# -- linear algebra -------------------------------------------------------

# BLAS picks different kernels (and summation orders) for different row
# counts, so a row's result could depend on how many rows share the call.
# Forward products are therefore issued in fixed-shape blocks, which makes
# every output row independent of batch size and position.
ROW_BLOCK = 256


def _rows_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m = a.shape[0]
    out = np.empty((m, b.shape[1]), dtype=np.result_type(a, b))
    for s in range(0, m, ROW_BLOCK):
        blk = a[s:s + ROW_BLOCK]
        if len(blk) < ROW_BLOCK:
            pad = np.zeros((ROW_BLOCK, a.shape[1]), dtype=a.dtype)
            pad[:len(blk)] = blk
            out[s:] = (pad @ b)[:len(blk)]
        else:
            out[s:s + ROW_BLOCK] = blk @ b
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _operands(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return make_op("matmul", _rows_matmul(ad, bd), (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w + b with w stored as (in, out)."""
    y = matmul(x, w)
    return add(y, b) if b is not None else y


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation on NCHW input with OIHW weights, via im2col."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    if b is not None and b.shape != (o,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({o},)")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    hp, wp = h + 2 * p, wd + 2 * p
    if hp < kh or wp < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out = _rows_matmul(cols, wmat.T)
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    keep_cols = cols if w.requires_grad else None
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, oh, ow, c, kh, kw)
            dxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        if w.requires_grad:
            gw = (g2.T @ keep_cols).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if b is None else (gx, gw, gb)

    return make_op("conv2d", out, inputs, bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation of NCHW input.

    In training mode the batch statistics normalise the input and the running
    buffers are updated in place (unbiased variance, PyTorch convention).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(f"batch_norm: shape mismatch x={x.shape} gamma={gamma.shape}")
    xd = x.data
    shp = (1, -1, 1, 1)
    if training:
        m = xd.shape[0] * xd.shape[2] * xd.shape[3]
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(shp)) * inv.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=(0, 2, 3))
        if beta.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(shp)
            if training:
                gx = inv.reshape(shp) * (
                    gxhat
                    - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                )
            else:
                gx = gxhat * inv.reshape(shp)
        return gx, gg, gb

    return make_op("batch_norm", out, (x, gamma, beta), bw)


def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return make_op("embedding", table.data[idx], (table,), bw)
