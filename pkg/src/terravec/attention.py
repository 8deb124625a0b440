"""Windowed multi-head self-attention block with a depthwise-conv feed-forward.

A feature map is cut into non-overlapping K x K windows, each window runs
multi-head self-attention with a learned relative-position bias, the
windows are merged back, and a pointwise-expand / depthwise-3x3 /
pointwise-contract feed-forward finishes the block. Both halves carry
residual connections, so a zero-weight block is the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import ops
from .layers import Module, uniform_init, zeros_param
from .tensor import Tensor, pad2d, take

__all__ = [
    "WindowGrid",
    "window_partition",
    "window_merge",
    "AttentionWeights",
    "window_mhsa",
    "window_attention",
    "ConvFFN",
    "RTBlock",
]


@dataclass
class WindowGrid:
    """Windowed view of a (C, H, W) map.

    ``windows`` stacks all windows as one (n, K*K, C) tensor whose rows are
    the window pixels in row-major order; ``valid`` marks rows that came
    from the original map rather than zero padding.
    """

    windows: Tensor
    window_size: int
    origin_shape: tuple
    padding: tuple
    grid: tuple
    valid: np.ndarray

    @property
    def n_windows(self) -> int:
        return self.grid[0] * self.grid[1]

    def window(self, i: int) -> Tensor:
        return self.windows[i]


def window_partition(x: Tensor, window_size: int) -> WindowGrid:
    """Split (C, H, W) into ceil(H/K) * ceil(W/K) windows of K*K rows."""
    if window_size <= 0:
        raise ValueError(f"window size must be positive, got {window_size}")
    k = window_size
    c, h, w = x.shape
    n_h = -(-h // k)
    n_w = -(-w // k)
    pad_b = n_h * k - h
    pad_r = n_w * k - w
    if pad_b or pad_r:
        x_p = pad2d(x, 0, pad_b, 0, pad_r)
    else:
        x_p = x
    windows = (
        x_p.reshape(c, n_h, k, n_w, k)
        .transpose(1, 3, 2, 4, 0)
        .reshape(n_h * n_w, k * k, c)
    )
    rows_ok = np.arange(n_h * k).reshape(n_h, k) < h
    cols_ok = np.arange(n_w * k).reshape(n_w, k) < w
    valid = (
        rows_ok[:, None, :, None] & cols_ok[None, :, None, :]
    ).reshape(n_h * n_w, k * k)
    return WindowGrid(windows, k, (c, h, w), (pad_b, pad_r), (n_h, n_w), valid)


def window_merge(grid: WindowGrid) -> Tensor:
    """Exact inverse of window_partition, padding stripped."""
    c, h, w = grid.origin_shape
    k = grid.window_size
    n_h, n_w = grid.grid
    if grid.windows.shape != (n_h * n_w, k * k, c):
        raise ValueError(
            f"window grid is inconsistent: windows {grid.windows.shape} "
            f"do not match grid {grid.grid} of size {k}"
        )
    full = (
        grid.windows.reshape(n_h, n_w, k, k, c)
        .transpose(4, 0, 2, 1, 3)
        .reshape(c, n_h * k, n_w * k)
    )
    if grid.padding == (0, 0):
        return full
    return full[:, :h, :w]


def relative_index_table(window_size: int) -> np.ndarray:
    """(K*K, K*K) index into a (2K-1)^2 bias table keyed by 2-D offset."""
    k = window_size
    coords = np.stack(np.meshgrid(np.arange(k), np.arange(k), indexing="ij"), axis=-1)
    coords = coords.reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :] + (k - 1)
    return rel[..., 0] * (2 * k - 1) + rel[..., 1]


class AttentionWeights(Module):
    """Projection matrices and per-head relative-position bias for one window size."""

    def __init__(self, rng, channels: int, heads: int, window_size: int):
        if channels % heads != 0:
            raise ValueError(
                f"channel count {channels} is not divisible by {heads} heads"
            )
        self.channels = channels
        self.heads = heads
        self.window_size = window_size
        self.wq = uniform_init(rng, (channels, channels), fan_in=channels)
        self.wk = uniform_init(rng, (channels, channels), fan_in=channels)
        self.wv = uniform_init(rng, (channels, channels), fan_in=channels)
        self.wo = uniform_init(rng, (channels, channels), fan_in=channels)
        self.bias_table = zeros_param((heads, (2 * window_size - 1) ** 2))
        self._rel_index = relative_index_table(window_size)

    def head_dim(self) -> int:
        return self.channels // self.heads


def window_attention(windows: Tensor, weights: AttentionWeights,
                     valid: np.ndarray | None = None,
                     return_probs: bool = False):
    """Multi-head self-attention applied independently to each window.

    ``windows`` is (n, L, C) with L = K*K. Padded key rows flagged false in
    ``valid`` are excluded from the softmax. The projected context is added
    residually to the input. With ``return_probs`` the (n, H, L, L)
    attention distribution is returned alongside the output.
    """
    n, length, c = windows.shape
    h = weights.heads
    dh = weights.head_dim()

    def split_heads(t):
        return t.reshape(n, length, h, dh).transpose(0, 2, 1, 3)

    q = split_heads(windows @ weights.wq)
    k = split_heads(windows @ weights.wk)
    v = split_heads(windows @ weights.wv)

    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    flat_idx = weights._rel_index.reshape(-1)
    bias = take(weights.bias_table, flat_idx, axis=1).reshape(h, length, length)
    scores = scores + bias
    if valid is not None and not valid.all():
        mask = np.where(valid, 0.0, -1e30).reshape(n, 1, 1, length)
        scores = scores + Tensor(mask)
    attn = ops.softmax(scores, axis=-1)
    ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(n, length, c)
    out = windows + ctx @ weights.wo
    if return_probs:
        return out, attn
    return out


def window_mhsa(window: Tensor, weights: AttentionWeights) -> Tensor:
    """Single-window contract: (L, C) in, (L, C) out."""
    length, c = window.shape
    out = window_attention(window.reshape(1, length, c), weights)
    return out.reshape(length, c)


class ConvFFN(Module):
    """Pointwise expand, depthwise 3x3, pointwise contract, with residual."""

    def __init__(self, rng, channels: int, expansion: int = 4):
        hidden = channels * expansion
        self.w_expand = uniform_init(rng, (hidden, channels), fan_in=channels)
        self.b_expand = zeros_param(hidden)
        self.dw_kernel = uniform_init(rng, (hidden, 3, 3), fan_in=9)
        self.dw_bias = zeros_param(hidden)
        self.w_contract = uniform_init(rng, (channels, hidden), fan_in=hidden)
        self.b_contract = zeros_param(channels)

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv1x1(x, self.w_expand, self.b_expand).relu()
        y = (ops.depthwise_conv3x3(y, self.dw_kernel)
             + self.dw_bias.reshape(-1, 1, 1)).relu()
        y = ops.conv1x1(y, self.w_contract, self.b_contract)
        return x + y


class RTBlock(Module):
    """Window partition, per-window attention, merge, feed-forward."""

    def __init__(self, rng, channels: int, heads: int, window_size: int,
                 expansion: int = 4):
        self.window_size = window_size
        self.attn = AttentionWeights(rng, channels, heads, window_size)
        self.ffn = ConvFFN(rng, channels, expansion)

    def __call__(self, x: Tensor) -> Tensor:
        grid = window_partition(x, self.window_size)
        attended = window_attention(grid.windows, self.attn, grid.valid)
        merged = window_merge(replace(grid, windows=attended))
        return self.ffn(merged)


def attention_cases():
    """Gradient-check builders for this module."""
    from .gradcheck import _leaf

    def c_window_attention(seed):
        rng = np.random.default_rng(seed)
        w = AttentionWeights(rng, channels=4, heads=2, window_size=2)
        w.bias_table = Tensor(rng.standard_normal(w.bias_table.shape) * 0.3,
                              requires_grad=True)
        x = _leaf(rng, 3, 4, 4, scale=0.8)
        wt = Tensor(rng.standard_normal((3, 4, 4)))

        def fn(x, *_):
            return (window_attention(x, w) * wt).sum()

        return fn, [x, w.wq, w.wk, w.wv, w.wo, w.bias_table]

    def c_rt_block(seed):
        rng = np.random.default_rng(seed)
        block = RTBlock(rng, channels=4, heads=2, window_size=2)
        x = _leaf(rng, 4, 3, 5, scale=0.8)
        wt = Tensor(rng.standard_normal((4, 3, 5)))
        return lambda x: (block(x) * wt).sum(), [x]

    def c_conv_ffn(seed):
        rng = np.random.default_rng(seed)
        ffn = ConvFFN(rng, channels=3, expansion=2)
        x = _leaf(rng, 3, 4, 4, scale=0.8)
        wt = Tensor(rng.standard_normal((3, 4, 4)))
        params = [x] + [p for _, p in sorted(ffn.named_params())]

        def fn(x, *_):
            return (ffn(x) * wt).sum()

        return fn, params

    return {
        "attention.window_attention": c_window_attention,
        "attention.rt_block_input": c_rt_block,
        "attention.conv_ffn": c_conv_ffn,
    }
