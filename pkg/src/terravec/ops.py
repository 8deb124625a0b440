"""Differentiable array operations used by the network.

All spatial operators act on channel-first arrays (C, H, W) without a
batch axis; batching is handled by the caller. Convolutions use zero
padding, resampling is corner-aligned, and normalization statistics are
taken over the spatial axes of each sample.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _node, as_tensor

__all__ = [
    "softmax",
    "conv2d_3x3",
    "depthwise_conv3x3",
    "conv1x1",
    "spatial_batchnorm",
    "conv1x1_bn_relu",
    "bilinear_resize",
    "bilinear_sample",
    "dropout",
]


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along one axis; slices sum to one."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return ((g - inner) * y,)

    return _node(y, (x,), vjp)


def conv2d_3x3(x: Tensor, w: Tensor, bias: Tensor | None = None,
               stride: int = 1) -> Tensor:
    """3x3 convolution with zero padding 1 and stride 1 or 2.

    ``x`` is (C, H, W), ``w`` is (C_out, C, 3, 3), output is
    (C_out, ceil(H/stride), ceil(W/stride)).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3 expects (C,H,W) and (C',C,3,3), got {x.shape} and {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"kernel input channels {w.shape[1]} != input channels {x.shape[0]}")
    c_in, h, w_in = x.shape
    c_out = w.shape[0]
    s = stride
    out_h = (h - 1) // s + 1
    out_w = (w_in - 1) // s + 1

    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::s, ::s]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(out_h * out_w, c_in * 9)
    wmat = w.data.reshape(c_out, c_in * 9)
    out = (cols @ wmat.T).T.reshape(c_out, out_h, out_w)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]

    def vjp(g):
        gmat = g.reshape(c_out, out_h * out_w).T
        gw = (gmat.T @ cols).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(out_h, out_w, c_in, 3, 3)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                gxp[:, di:di + s * (out_h - 1) + 1:s,
                    dj:dj + s * (out_w - 1) + 1:s] += gcols[:, :, :, di, dj].transpose(2, 0, 1)
        gx = gxp[:, 1:1 + h, 1:1 + w_in]
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, vjp)


def depthwise_conv3x3(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel 3x3 convolution, zero padding 1, stride 1.

    Channel c of the output depends only on channel c of the input.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if kernels.shape != (x.shape[0], 3, 3):
        raise ShapeError(
            f"depthwise kernels {kernels.shape} do not match input channels {x.shape}"
        )
    c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x.data)
    for di in range(3):
        for dj in range(3):
            out += kernels.data[:, di, dj, None, None] * xp[:, di:di + h, dj:dj + w]

    def vjp(g):
        gk = np.empty_like(kernels.data)
        gxp = np.zeros_like(xp)
        for di in range(3):
            for dj in range(3):
                patch = xp[:, di:di + h, dj:dj + w]
                gk[:, di, dj] = (g * patch).sum(axis=(1, 2))
                gxp[:, di:di + h, dj:dj + w] += g * kernels.data[:, di, dj, None, None]
        return gxp[:, 1:1 + h, 1:1 + w], gk

    return _node(out, (x, kernels), vjp)


def conv1x1(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise channel mixing: (C,H,W) x (C',C) -> (C',H,W)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv1x1 weight {w.shape} does not match input {x.shape}")
    out = np.einsum("oc,chw->ohw", w.data, x.data)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None, None]

    def vjp(g):
        gw = np.einsum("ohw,chw->oc", g, x.data)
        gx = np.einsum("oc,ohw->chw", w.data, g)
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    parents = (x, w) if bias is None else (x, w, bias)
    return _node(out, parents, vjp)


def spatial_batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
                      eps: float = 1e-5) -> Tensor:
    """Normalize each channel to zero mean / unit variance over (H, W),
    then apply a learned per-channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c, h, w = x.shape
    n = h * w
    mu = x.data.mean(axis=(1, 2), keepdims=True)
    var = x.data.var(axis=(1, 2), keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * istd
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def vjp(g):
        ggamma = (g * xhat).sum(axis=(1, 2))
        gbeta = g.sum(axis=(1, 2))
        dxhat = g * gamma.data[:, None, None]
        s1 = dxhat.sum(axis=(1, 2), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(1, 2), keepdims=True)
        gx = (istd / n) * (n * dxhat - s1 - xhat * s2)
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), vjp)


def conv1x1_bn_relu(x: Tensor, w: Tensor, gamma: Tensor, beta: Tensor,
                    bias: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Pointwise linear map, per-channel spatial normalization, ReLU clamp."""
    return spatial_batchnorm(conv1x1(x, w, bias), gamma, beta, eps=eps).relu()


def _grid_positions(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned source coordinates for resizing n_in -> n_out."""
    if n_out == 1:
        return np.array([0.5 * (n_in - 1)])
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resampling of a (C, H, W) tensor.

    Reproduces the input exactly when the target shape matches, and maps
    constant fields to the same constant.
    """
    x = as_tensor(x)
    c, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target shape must be positive, got ({out_h}, {out_w})")
    rows = _grid_positions(h, out_h)
    cols = _grid_positions(w, out_w)
    r0 = np.minimum(np.floor(rows).astype(np.intp), max(h - 2, 0))
    c0 = np.minimum(np.floor(cols).astype(np.intp), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]

    corners = (
        ((1 - fr) * (1 - fc), r0, c0),
        ((1 - fr) * fc, r0, c1),
        (fr * (1 - fc), r1, c0),
        (fr * fc, r1, c1),
    )
    out = np.zeros((c, out_h, out_w))
    for wgt, ri, ci in corners:
        out += wgt * x.data[:, ri[:, None], ci[None, :]]

    def vjp(g):
        gx = np.zeros((c, h * w))
        chan = np.arange(c)[:, None, None]
        for wgt, ri, ci in corners:
            flat = (ri[:, None] * w + ci[None, :])[None, :, :]
            np.add.at(gx, (chan, flat), g * wgt)
        return (gx.reshape(c, h, w),)

    return _node(out, (x,), vjp)


def bilinear_sample(field: Tensor, points: Tensor) -> Tensor:
    """Sample a (H, W) field at continuous (row, col) points, border clamped.

    Returns one value per point. Differentiable with respect to both the
    field values and, inside the grid, the point coordinates.
    """
    field, points = as_tensor(field), as_tensor(points)
    if field.ndim != 2 or points.ndim != 2 or points.shape[1] != 2:
        raise ShapeError(
            f"bilinear_sample expects (H,W) field and (N,2) points, got {field.shape} and {points.shape}"
        )
    h, w = field.shape
    raw_r = points.data[:, 0]
    raw_c = points.data[:, 1]
    r = np.clip(raw_r, 0.0, h - 1.0)
    cc = np.clip(raw_c, 0.0, w - 1.0)
    r0 = np.minimum(np.floor(r).astype(np.intp), max(h - 2, 0))
    c0 = np.minimum(np.floor(cc).astype(np.intp), max(w - 2, 0))
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = cc - c0

    f = field.data
    v00 = f[r0, c0]
    v01 = f[r0, c1]
    v10 = f[r1, c0]
    v11 = f[r1, c1]
    out = ((1 - fr) * (1 - fc) * v00 + (1 - fr) * fc * v01
           + fr * (1 - fc) * v10 + fr * fc * v11)

    inside_r = (raw_r >= 0.0) & (raw_r <= h - 1.0)
    inside_c = (raw_c >= 0.0) & (raw_c <= w - 1.0)

    def vjp(g):
        gf = np.zeros((h * w,))
        np.add.at(gf, r0 * w + c0, g * (1 - fr) * (1 - fc))
        np.add.at(gf, r0 * w + c1, g * (1 - fr) * fc)
        np.add.at(gf, r1 * w + c0, g * fr * (1 - fc))
        np.add.at(gf, r1 * w + c1, g * fr * fc)
        dr = (1 - fc) * (v10 - v00) + fc * (v11 - v01)
        dc = (1 - fr) * (v01 - v00) + fr * (v11 - v10)
        gp = np.stack([g * dr * inside_r, g * dc * inside_c], axis=1)
        return gf.reshape(h, w), gp

    return _node(out, (field, points), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or the rate is zero."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))
