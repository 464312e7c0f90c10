"""Cost embedding: 4D cost volume -> 5D cost feature volume, plus lookup.

The embedder is a compact conv + attention stand-in:

1. two stages of separable 4D convolution (a 3x3 conv over the target plane
   followed by a 3x3 conv over the source plane), with the raw cost added
   back to every output channel;
2. each source cell's target slice, averaged over channels, becomes one
   token, projected to ``K`` dimensions;
3. one pre-norm transformer block (multi-head self-attention over the
   source tokens, then a feed-forward layer, both residual);
4. the attended token of each source cell is added to every target cell of
   its slice, giving shape ``(h_s, w_s, h_t, w_t, K)``.

Query points are continuous pixel coordinates ``[x_row, x_col, y_row,
y_col]``; they map onto the grid by ``g = p * (cells - 1) / (pixels - 1)``
and are clamped to the grid edges.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .params import ParamSet, he_uniform
from .tensor import Tensor


@dataclass(frozen=True)
class EmbedConfig:
    grid: tuple[int, int, int, int] = (16, 16, 16, 16)
    channels: int = 16
    conv_channels: int = 4
    heads: int = 4
    ffn_mult: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")


class EmbedderParams(ParamSet):
    prefix = "embed."

    def __init__(self, config: EmbedConfig = EmbedConfig(), seed: int = 0, zero_residual: bool = True):
        super().__init__(config)
        rng = np.random.default_rng(seed)
        dt = config.dtype
        c, K = config.conv_channels, config.channels
        hs, ws, ht, wt = config.grid

        def conv(name, cin, cout, zero=False):
            w = np.zeros((9 * cin, cout)) if zero else he_uniform(rng, 9 * cin, (9 * cin, cout), dt)
            self.add(f"{name}.weight", w)
            self.add(f"{name}.bias", np.zeros(cout))

        def linear(name, fan_in, fan_out, zero=False):
            w = np.zeros((fan_in, fan_out)) if zero else he_uniform(rng, fan_in, (fan_in, fan_out), dt)
            self.add(f"{name}.weight", w)
            self.add(f"{name}.bias", np.zeros(fan_out))

        conv("conv1_t", 1, c)
        conv("conv1_s", c, c)
        conv("conv2_t", c, c)
        conv("conv2_s", c, K, zero=zero_residual)
        linear("token", ht * wt, K)
        self.add("ln1.gain", np.ones(K))
        self.add("ln1.bias", np.zeros(K))
        for name in ("q", "k", "v"):
            linear(f"attn.{name}", K, K)
        linear("attn.out", K, K, zero=zero_residual)
        self.add("ln2.gain", np.ones(K))
        self.add("ln2.bias", np.zeros(K))
        linear("ffn1", K, config.ffn_mult * K)
        linear("ffn2", config.ffn_mult * K, K, zero=zero_residual)


def _conv_plane(x: Tensor, weight: Tensor, bias: Tensor, axes: tuple[int, int]) -> Tensor:
    """3x3 zero-padded convolution over two of the four spatial axes."""
    widths = [(0, 0)] * 5
    for ax in axes:
        widths[ax] = (1, 1)
    xp = T.pad(x, widths)
    n0, n1 = x.shape[axes[0]], x.shape[axes[1]]
    cols = []
    for di in range(3):
        for dj in range(3):
            key = [slice(None)] * 5
            key[axes[0]] = slice(di, di + n0)
            key[axes[1]] = slice(dj, dj + n1)
            cols.append(xp[tuple(key)])
    stacked = T.concat(cols, axis=-1)
    out = stacked.reshape(-1, stacked.shape[-1]) @ weight + bias
    return out.reshape(x.shape[:4] + (weight.shape[1],))


def conv4d_separable(x: Tensor, params: EmbedderParams, stage: int) -> Tensor:
    x = _conv_plane(x, params[f"conv{stage}_t.weight"], params[f"conv{stage}_t.bias"], (2, 3))
    return _conv_plane(x, params[f"conv{stage}_s.weight"], params[f"conv{stage}_s.bias"], (0, 1))


def _linear(x: Tensor, params: EmbedderParams, name: str) -> Tensor:
    return x @ params[f"{name}.weight"] + params[f"{name}.bias"]


def attention_block(tokens: Tensor, params: EmbedderParams) -> Tensor:
    """Pre-norm multi-head self-attention + feed-forward over (S, K) tokens."""
    S, K = tokens.shape
    H = params.config.heads
    dh = K // H

    a = T.layer_norm(tokens, params["ln1.gain"], params["ln1.bias"])

    def heads(name):
        return _linear(a, params, f"attn.{name}").reshape(S, H, dh).transpose(1, 0, 2)

    q, k, v = heads("q"), heads("k"), heads("v")
    att = T.softmax((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(dh)), axis=-1)
    ctx = (att @ v).transpose(1, 0, 2).reshape(S, K)
    tokens = tokens + _linear(ctx, params, "attn.out")

    b = T.layer_norm(tokens, params["ln2.gain"], params["ln2.bias"])
    return tokens + _linear(T.relu(_linear(b, params, "ffn1")), params, "ffn2")


def embed(cost, params: EmbedderParams) -> Tensor:
    """Embed a (h_s, w_s, h_t, w_t) cost volume into (h_s, w_s, h_t, w_t, K)."""
    cfg = params.config
    data = cost.data if isinstance(cost, Tensor) else np.asarray(cost)
    if tuple(data.shape) != tuple(cfg.grid):
        raise ShapeError(f"embed: cost volume {tuple(data.shape)} does not match configured grid {cfg.grid}")
    c = cost if isinstance(cost, Tensor) else Tensor(data.astype(cfg.dtype))
    hs, ws, ht, wt = cfg.grid
    K = cfg.channels
    x = c.reshape(hs, ws, ht, wt, 1)

    h1 = T.relu(conv4d_separable(x, params, 1))
    local = conv4d_separable(h1, params, 2) + x.broadcast_to((hs, ws, ht, wt, K))

    tokens = T.mean(local, axis=-1).reshape(hs * ws, ht * wt)
    z = attention_block(_linear(tokens, params, "token"), params)
    ctx = z.reshape(hs, ws, 1, 1, K).broadcast_to((hs, ws, ht, wt, K))
    return local + ctx


def pool(vol: Tensor) -> Tensor:
    """Channel-wise mean of the cost feature volume."""
    return T.mean(vol, axis=-1)


def grid_scale(src_shape, tgt_shape, grid) -> np.ndarray:
    """Scale factors taking pixel coordinates to grid coordinates per axis."""
    extents = (src_shape[0], src_shape[1], tgt_shape[0], tgt_shape[1])
    return np.array([(g - 1) / (e - 1) if e > 1 else 0.0 for g, e in zip(grid, extents)])


def quadlinear(vol: Tensor, g: Tensor) -> Tensor:
    """Multilinear lookup of ``vol`` (h_s, w_s, h_t, w_t, K) at grid points ``g`` (N, 4).

    Coordinates are clamped to ``[0, cells - 1]``; the gradient with respect
    to ``g`` is zero along clamped axes.  The 16 corner contributions are
    accumulated in a fixed order so every output row is independent of the
    rest of the batch.
    """
    dims = np.array(vol.shape[:4])
    K = vol.shape[4]
    gd = g.data
    dtype = vol.dtype
    upper = (dims - 1).astype(gd.dtype)
    inside = (gd >= 0) & (gd <= upper)
    gc = np.clip(gd, 0, upper)
    lo = np.minimum(np.floor(gc), np.maximum(dims - 2, 0)).astype(np.int64)
    hi = np.minimum(lo + 1, dims - 1)
    frac = (gc - lo).astype(dtype)
    strides = np.array([dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1])
    flat = vol.data.reshape(-1, K)

    corners = []
    out = np.zeros((gd.shape[0], K), dtype=dtype)
    for c in range(16):
        bits = [(c >> (3 - a)) & 1 for a in range(4)]
        idx = np.zeros(gd.shape[0], dtype=np.int64)
        w = np.ones(gd.shape[0], dtype=dtype)
        for a, bit in enumerate(bits):
            idx += (hi[:, a] if bit else lo[:, a]) * strides[a]
            w = w * (frac[:, a] if bit else 1 - frac[:, a])
        vals = flat[idx]
        out += w[:, None] * vals
        corners.append((bits, idx, w, vals))

    def bw(gout):
        dvol = None
        if vol.requires_grad:
            dflat = np.zeros_like(flat)
            for _, idx, w, _ in corners:
                np.add.at(dflat, idx, w[:, None] * gout)
            dvol = dflat.reshape(vol.shape)
        dg = None
        if g.requires_grad:
            dg = np.zeros(gd.shape, dtype=dtype)
            for bits, _, _, vals in corners:
                proj = (vals * gout).sum(axis=1)
                for a in range(4):
                    dw = np.ones(gd.shape[0], dtype=dtype) if bits[a] else -np.ones(gd.shape[0], dtype=dtype)
                    for b in range(4):
                        if b != a:
                            dw = dw * (frac[:, b] if bits[b] else 1 - frac[:, b])
                    dg[:, a] += dw * proj
            dg = (dg * inside).astype(gd.dtype)
        return dvol, dg

    return T.make_op(out, (vol, g), bw, "quadlinear")


def interpolate(vol: Tensor, points, src_shape, tgt_shape) -> Tensor:
    """Cost feature vectors at continuous pixel-coordinate query points (N, 4)."""
    p = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=vol.dtype))
    if p.ndim != 2 or p.shape[1] != 4:
        raise ShapeError(f"interpolate: points must be (N, 4), got {p.shape}")
    scale = grid_scale(src_shape, tgt_shape, vol.shape[:4]).astype(p.dtype)
    return quadlinear(vol, p * scale)
