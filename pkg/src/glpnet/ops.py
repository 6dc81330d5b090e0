"""Differentiable kernels on :class:`~glpnet.tensor.Tensor`.

All feature maps are ``[N, C, H, W]``. Every function returns a new tensor
and, when any input requires grad, records a backward closure on the tape.
"""

from __future__ import annotations

import numpy as np

from glpnet.tensor import ContractError, ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _operand(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return make_node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _operand(b, a)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return make_node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return make_node(a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return make_node(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- structural

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from exc
    src = x.shape
    return make_node(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes=None) -> Tensor:
    """Permute axes; with ``axes=None`` swap the last two."""
    if axes is None:
        axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: bad permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_node(out, (x,), lambda g: (g.transpose(inverse),))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: extents {t.shape} vs {ref} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(out, tensors, backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4:
        raise ShapeError("concat_channels expects [N,C,H,W] operands")
    return concat([a, b], axis=1)


def index(x: Tensor, key) -> Tensor:
    """Indexing by any numpy key; repeated integer indices accumulate gradient."""
    out = np.ascontiguousarray(x.data[key])
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, key, g)
        return (full,)

    return make_node(out, (x,), backward)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[M,P] @ [P,Q]``; also batched ``[B,M,P] @ [B,P,Q]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} x {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def backward(g):
        return np.matmul(g, bd.swapaxes(-1, -2)), np.matmul(ad.swapaxes(-1, -2), g)

    return make_node(out, (a, b), backward)


def conv_output_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0,
           dilation: int = 1) -> Tensor:
    """2-D cross-correlation (no kernel flip) via an im2col GEMM."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, pad, dilation)
    wo = conv_output_size(wd, kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: non-positive output extent {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            cols[:, i, j] = xt[:, :, hs:hs + hspan:stride, ws:ws + wspan:stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    w2 = w.data.reshape(cout, -1)
    out = (w2 @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    padded_shape = xp.shape

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((padded_shape[1], padded_shape[0]) + padded_shape[2:], dtype=g.dtype)
            for i in range(kh):
                hs = i * dilation
                for j in range(kw):
                    ws = j * dilation
                    gxp[:, :, hs:hs + hspan:stride, ws:ws + wspan:stride] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)[:, :, pad:pad + h, pad:pad + wd]
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, w, bias) if bias is not None else (x, w)
    return make_node(out, parents, backward)


# ---------------------------------------------------------------- normalisers

def _softmax_backward(y: np.ndarray, g: np.ndarray, axes) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axes, keepdims=True))


def spatial_softmax(x: Tensor) -> Tensor:
    """Softmax over the H*W positions of every ``(n, k)`` plane."""
    if x.ndim != 4:
        raise ShapeError(f"spatial_softmax expects [N,K,H,W], got {x.shape}")
    z = x.data - x.data.max(axis=(2, 3), keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=(2, 3), keepdims=True)
    return make_node(y, (x,), lambda g: (_softmax_backward(y, g, (2, 3)),))


def channel_softmax(x: Tensor) -> Tensor:
    """Row softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return make_node(y, (x,), lambda g: (_softmax_backward(y, g, -1),))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of ``[N,C,H,W]``.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance); in eval mode the buffers are
    used as-is.
    """
    n, c, h, w = x.shape
    m = n * h * w
    shape = (1, c, 1, 1)
    gd = gamma.data.reshape(shape)
    if training:
        if m < 2:
            raise ContractError("batch_norm: training mode needs at least two values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * var.reshape(c) * (m / (m - 1))
    else:
        xc = x.data - running_mean.reshape(shape).astype(x.dtype)
        var = running_var.reshape(shape).astype(x.dtype)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    out = gd * xhat + beta.data.reshape(shape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gd
        if training:
            gx = inv / m * (m * dxhat - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True))
        else:
            gx = dxhat * inv
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- resampling

def bilinear_sample(x: Tensor, coords: Tensor) -> Tensor:
    """Sample ``x`` at absolute pixel coordinates.

    ``coords[:, 0]`` is the x (column) coordinate and ``coords[:, 1]`` the y
    (row) coordinate of each output position. Coordinates are clamped to the
    input grid before interpolation, so the gradient w.r.t. a clamped
    coordinate is zero.
    """
    if x.ndim != 4 or coords.ndim != 4 or coords.shape[1] != 2 or coords.shape[0] != x.shape[0]:
        raise ShapeError(f"bilinear_sample: bad shapes {x.shape}, {coords.shape}")
    n, c, h, w = x.shape
    ho, wo = coords.shape[2:]
    cd = coords.data.astype(x.dtype, copy=False)
    px = np.clip(cd[:, 0], 0, w - 1)
    py = np.clip(cd[:, 1], 0, h - 1)
    fx0, fy0 = np.floor(px), np.floor(py)
    x0, y0 = fx0.astype(np.int64), fy0.astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    # subtract the float floors: float32 - int64 would promote to float64
    fx = (px - fx0).reshape(n, 1, -1)
    fy = (py - fy0).reshape(n, 1, -1)
    gx_, gy_ = 1 - fx, 1 - fy
    flat = x.data.reshape(n, c, h * w)
    idx = [(yy * w + xx).reshape(n, 1, -1) for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1))]
    v00, v01, v10, v11 = (np.take_along_axis(flat, i, axis=2) for i in idx)
    out = (v00 * (gx_ * gy_) + v01 * (fx * gy_) + v10 * (gx_ * fy) + v11 * (fx * fy))
    out = out.reshape(n, c, ho, wo)
    inside_x = ((cd[:, 0] >= 0) & (cd[:, 0] <= w - 1)).reshape(n, 1, -1)
    inside_y = ((cd[:, 1] >= 0) & (cd[:, 1] <= h - 1)).reshape(n, 1, -1)

    def backward(g):
        g = g.reshape(n, c, -1)
        gx = gc = None
        if x.requires_grad:
            base = (np.arange(n * c).reshape(n, c, 1) * (h * w))
            weights = (gx_ * gy_, fx * gy_, gx_ * fy, fx * fy)
            flat_idx = np.concatenate([np.broadcast_to(base + i, g.shape).ravel() for i in idx])
            contrib = np.concatenate([(g * wgt).ravel() for wgt in weights])
            gx = np.bincount(flat_idx, weights=contrib, minlength=n * c * h * w)
            gx = gx.astype(x.dtype).reshape(n, c, h, w)
        if coords.requires_grad:
            dfx = ((v01 - v00) * gy_ + (v11 - v10) * fy) * g
            dfy = ((v10 - v00) * gx_ + (v11 - v01) * fx) * g
            dpx = dfx.sum(axis=1, keepdims=True) * inside_x
            dpy = dfy.sum(axis=1, keepdims=True) * inside_y
            gc = np.concatenate([dpx, dpy], axis=1).reshape(n, 2, ho, wo).astype(coords.dtype)
        return gx, gc

    return make_node(out, (x, coords), backward)


def interpolation_matrix(n_in: int, n_out: int, align_corners: bool = True,
                         dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``[n_out, n_in]`` matrix of 1-D linear interpolation weights."""
    if n_out < 1 or n_in < 1:
        raise ShapeError(f"interpolation extents must be >= 1, got {n_in} -> {n_out}")
    i = np.arange(n_out, dtype=np.float64)
    if align_corners:
        src = i * ((n_in - 1) / (n_out - 1)) if n_out > 1 else np.zeros(1)
    else:
        src = np.clip((i + 0.5) * (n_in / n_out) - 0.5, 0, None)
    src = np.minimum(src, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    mat[rows, lo] += 1 - frac
    mat[rows, hi] += frac
    return mat.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int, align_corners: bool = True) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects [N,C,H,W], got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return make_node(x.data.copy(), (x,), lambda g: (g,))
    ry = interpolation_matrix(h, out_h, align_corners, x.dtype)
    rx = interpolation_matrix(w, out_w, align_corners, x.dtype)
    out = np.matmul(ry, np.matmul(x.data, rx.T))

    def backward(g):
        return (np.matmul(ry.T, np.matmul(g, rx)),)

    return make_node(out, (x,), backward)
