"""Differentiable forward ops over :class:`~dragonfly.tensor.Tensor`.

Image tensors are laid out NCHW.  Convolutions and pools take
``padding="valid"`` (no padding, ``out = floor((in - window) / stride) + 1``)
or ``padding="same"`` (``out = ceil(in / stride)``, padding split as evenly
as possible with the extra cell at the end).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DomainError, ShapeError, Tensor, as_tensor, emit

SOFTLOG_TOL = 1e-9
_E = math.exp(1.0)
SOFTLOG_SCALE = _E - 1.0 / _E
SOFTLOG_SHIFT = 1.0 / _E


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / reductions


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return emit("add", (a, b), out,
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return emit("mul", (a, b), out,
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return emit("neg", (a,), -a.data, lambda g: (-g,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return emit("sum", (a,), np.asarray(out), bwd)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return emit("reshape", (a,), out, lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="expected a matrix")
    return emit("transpose", (a,), a.data.T, lambda g: (g.T,))


def flatten(a: Tensor) -> Tensor:
    """Vectorize everything but the batch axis."""
    return reshape(a, (a.shape[0], -1))


def log(a: Tensor) -> Tensor:
    """Plain natural log.  Kept for the unsafe-loss stress harness only."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return emit("log", (a,), out, lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return emit("relu", (a,), a.data * mask, lambda g: (g * mask,))


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return emit("concat", tuple(tensors), out, lambda g: tuple(np.split(g, sizes, axis=axis)))


def affine_combine(tensors, weights: Tensor) -> Tensor:
    """``sum_b weights[b] * tensors[b]`` for a list of equally shaped tensors."""
    tensors = [as_tensor(t) for t in tensors]
    if weights.shape != (len(tensors),):
        raise ShapeError("affine_combine", weights.shape, (len(tensors),),
                         detail="one weight per input")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError("affine_combine", *[t.shape for t in tensors])
    w = weights.data
    out = np.zeros(shape, dtype=np.result_type(w, *[t.data for t in tensors]))
    for wb, t in zip(w, tensors):
        out = out + wb * t.data

    def bwd(g):
        gx = [wb * g for wb in w]
        gw = np.array([np.sum(g * t.data) for t in tensors], dtype=w.dtype)
        return (*gx, gw)

    return emit("affine_combine", (*tensors, weights), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return emit("matmul", (a, b), a.data @ b.data,
                lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# probability heads


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return emit("softmax", (a,), s, bwd)


def check_unit_interval(x: np.ndarray, op: str = "softlog") -> np.ndarray:
    x = np.asarray(x)
    if x.size and (x.min() < -SOFTLOG_TOL or x.max() > 1.0 + SOFTLOG_TOL or np.isnan(x).any()):
        raise DomainError(f"{op}: input outside [0, 1] (min={np.nanmin(x)!r}, max={np.nanmax(x)!r})")
    return np.clip(x, 0.0, 1.0)


def softlog(a: Tensor) -> Tensor:
    """Elementwise ``log((e - 1/e) x + 1/e)``, mapping [0, 1] onto [-1, 1]."""
    x = check_unit_interval(a.data)
    arg = SOFTLOG_SCALE * x + SOFTLOG_SHIFT
    return emit("softlog", (a,), np.log(arg), lambda g: (g * SOFTLOG_SCALE / arg,))


# ---------------------------------------------------------------------------
# spatial ops


def _padding(n: int, window: int, stride: int, padding: str, op: str) -> tuple[int, int, int]:
    """Return (pad_before, pad_after, out_extent) along one axis."""
    if padding == "valid":
        if n < window:
            raise ShapeError(op, (n,), (window,), detail="extent smaller than window")
        return 0, 0, (n - window) // stride + 1
    if padding == "same":
        out = -(-n // stride)
        total = max((out - 1) * stride + window - n, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"{op}: unknown padding {padding!r}")


def _pad_spatial(x: np.ndarray, pads, value=0.0) -> np.ndarray:
    (t, b), (l, r) = pads
    if t == b == l == r == 0:
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + t + b, w + l + r), value, dtype=x.dtype)
    out[:, :, t : t + h, l : l + w] = x
    return out


def _windows(xp: np.ndarray, window: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Ho, Wo, window, window) read-only view."""
    v = sliding_window_view(xp, (window, window), axis=(2, 3))
    return v[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _geometry(x: Tensor, window: int, stride: int, padding: str, op: str):
    if x.ndim != 4:
        raise ShapeError(op, x.shape, detail="expected NCHW input")
    _, _, h, w = x.shape
    pt, pb, ho = _padding(h, window, stride, padding, op)
    pl, pr, wo = _padding(w, window, stride, padding, op)
    return ((pt, pb), (pl, pr)), ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Dense 2D cross-correlation.  ``w`` has shape (C_out, C_in, L, L); no bias."""
    if w.ndim != 4 or x.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape)
    k = w.shape[2]
    pads, ho, wo = _geometry(x, k, stride, padding, "conv2d")
    xp = _pad_spatial(x.data, pads)
    n, c = x.shape[:2]
    o = w.shape[0]
    # im2col: rows are output pixels, columns are (C, k, k) patches
    cols = np.ascontiguousarray(_windows(xp, k, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * ho * wo, c * k * k)
    w2 = w.data.reshape(o, -1)
    out = np.ascontiguousarray((cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def bwd(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(w.shape)
        gcol = (g2 @ w2).reshape(n, ho, wo, c, k, k)
        gx = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[_offset_slice(i, j, stride, ho, wo)] += gcol[..., i, j].transpose(0, 3, 1, 2)
        return _unpad(gx, pads), gw

    return emit("conv2d", (x, w), out, bwd)


def _offset_slice(i: int, j: int, stride: int, ho: int, wo: int):
    return (slice(None), slice(None),
            slice(i, i + (ho - 1) * stride + 1, stride),
            slice(j, j + (wo - 1) * stride + 1, stride))


def _unpad(gp: np.ndarray, pads) -> np.ndarray:
    (pt, pb), (pl, pr) = pads
    return gp[:, :, pt : gp.shape[2] - pb, pl : gp.shape[3] - pr]


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
    """Channelwise spatial convolution.  ``w`` has shape (C, L, L)."""
    if w.ndim != 3 or x.ndim != 4 or w.shape[0] != x.shape[1] or w.shape[1] != w.shape[2]:
        raise ShapeError("depthwise_conv2d", x.shape, w.shape)
    k = w.shape[1]
    pads, ho, wo = _geometry(x, k, stride, padding, "depthwise_conv2d")
    xp = _pad_spatial(x.data, pads)
    n, c = x.shape[:2]
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x.data, w.data))
    for i in range(k):
        for j in range(k):
            out += xp[_offset_slice(i, j, stride, ho, wo)] * w.data[None, :, i, j, None, None]

    def bwd(g):
        gw = np.empty_like(w.data)
        gx = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                sl = _offset_slice(i, j, stride, ho, wo)
                gw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
                gx[sl] += g * w.data[None, :, i, j, None, None]
        return _unpad(gx, pads), gw

    return emit("depthwise_conv2d", (x, w), out, bwd)


def pointwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution mixing channels.  ``w`` has shape (C_out, C_in)."""
    if w.ndim != 2 or x.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ShapeError("pointwise_conv", x.shape, w.shape)
    out = np.einsum("nchw,oc->nohw", x.data, w.data, optimize=True)

    def bwd(g):
        return (np.einsum("nohw,oc->nchw", g, w.data, optimize=True),
                np.einsum("nohw,nchw->oc", g, x.data, optimize=True))

    return emit("pointwise_conv", (x, w), out, bwd)


def _axis_slice(axis: int, start: int, stride: int, n_out: int):
    sl = [slice(None)] * 4
    sl[axis] = slice(start, start + (n_out - 1) * stride + 1, stride)
    return tuple(sl)


def _max_1d(x: np.ndarray, axis: int, window: int, stride: int, n_out: int):
    best = x[_axis_slice(axis, 0, stride, n_out)].copy()
    for o in range(1, window):
        np.maximum(best, x[_axis_slice(axis, o, stride, n_out)], out=best)
    return best


def _max_1d_adjoint(g, x, best, axis: int, window: int, stride: int, n_out: int):
    # route each output gradient to the first offset attaining the max
    gx = np.zeros(x.shape, dtype=g.dtype)
    free = np.ones(best.shape, dtype=bool)
    hit = np.empty(best.shape, dtype=bool)
    buf = np.empty(best.shape, dtype=g.dtype)
    for o in range(window):
        sl = _axis_slice(axis, o, stride, n_out)
        np.equal(x[sl], best, out=hit)
        hit &= free
        np.multiply(g, hit, out=buf)
        gx[sl] += buf
        if o < window - 1:
            free ^= hit
    return gx


def maxpool(x: Tensor, window: int, stride: int, padding: str = "valid") -> Tensor:
    """Max pooling, evaluated separably (columns, then rows)."""
    pads, ho, wo = _geometry(x, window, stride, padding, "maxpool")
    xp = _pad_spatial(x.data, pads, value=-np.inf)
    cols = _max_1d(xp, 3, window, stride, wo)
    out = _max_1d(cols, 2, window, stride, ho)

    def bwd(g):
        gc = _max_1d_adjoint(g, cols, out, 2, window, stride, ho)
        gx = _max_1d_adjoint(gc, xp, cols, 3, window, stride, wo)
        return (_unpad(gx, pads),)

    return emit("maxpool", (x,), out, bwd)


def _sum_1d(x: np.ndarray, axis: int, window: int, stride: int, n_out: int):
    total = x[_axis_slice(axis, 0, stride, n_out)].copy()
    for o in range(1, window):
        total += x[_axis_slice(axis, o, stride, n_out)]
    return total


def _sum_1d_adjoint(g, shape, axis: int, window: int, stride: int, n_out: int):
    gx = np.zeros(shape, dtype=g.dtype)
    for o in range(window):
        gx[_axis_slice(axis, o, stride, n_out)] += g
    return gx


def avgpool(x: Tensor, window: int, stride: int, padding: str = "valid") -> Tensor:
    """Average pooling; padded cells are excluded from the divisor."""
    pads, ho, wo = _geometry(x, window, stride, padding, "avgpool")
    xp = _pad_spatial(x.data, pads)
    ones = _pad_spatial(np.ones((1, 1) + x.shape[2:], dtype=x.dtype), pads)
    count = _sum_1d(_sum_1d(ones, 3, window, stride, wo), 2, window, stride, ho)
    cols = _sum_1d(xp, 3, window, stride, wo)
    out = _sum_1d(cols, 2, window, stride, ho) / count

    def bwd(g):
        gc = _sum_1d_adjoint(g / count, cols.shape, 2, window, stride, ho)
        gx = _sum_1d_adjoint(gc, xp.shape, 3, window, stride, wo)
        return (_unpad(gx, pads),)

    return emit("avgpool", (x,), out, bwd)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
              running: tuple[np.ndarray, np.ndarray] | None = None):
    """Per-channel batch normalization over (N, H, W) for NCHW, or N for (N, C).

    With ``running=None`` batch statistics are used and returned alongside the
    output as ``(out, batch_mean, batch_var)``.  Otherwise ``running`` supplies
    (mean, var) and only the output is returned.
    """
    if x.ndim not in (2, 4) or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("batchnorm", x.shape, gamma.shape, beta.shape)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    m = x.data.size / x.shape[1]
    sub = "nc->c" if x.ndim == 2 else "nchw->c"
    pair = "nc,nc->c" if x.ndim == 2 else "nchw,nchw->c"
    if running is None:
        mu = np.einsum(sub, x.data) / m
        xhat = x.data - mu.reshape(bshape)
        var = np.einsum(pair, xhat, xhat) / m
    else:
        mu, var = running
        xhat = x.data - mu.reshape(bshape)
    istd = 1.0 / np.sqrt(var + eps)
    xhat *= istd.reshape(bshape)
    out = xhat * g_
    out += b_

    def bwd(g):
        dgamma = np.einsum(pair, g, xhat)
        dbeta = np.einsum(sub, g)
        scale = (gamma.data * istd).reshape(bshape)
        if running is None:
            dx = g - (dbeta / m).reshape(bshape)
            dx -= xhat * (dgamma / m).reshape(bshape)
            dx *= scale
        else:
            dx = g * scale
        return dx, dgamma, dbeta

    y = emit("batchnorm", (x, gamma, beta), out, bwd)
    if running is None:
        return y, mu, var
    return y
