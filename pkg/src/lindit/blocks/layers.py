"""Building blocks of the linear DiT.

Every projection is a :class:`Linear` carrying a ``role`` string; the
quantizer swaps individual layers by role without touching the rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from lindit.errors import ConditioningError, DimensionError, DomainError, GeometryError
from lindit.linattn import DEFAULT_EPS as ATTN_EPS
from lindit.linattn import linear_attention, softmax_attention_heads
from lindit.numerics import (
    DEFAULT_EPS,
    Tensor,
    add,
    broadcast_to,
    chunk,
    depthwise_conv3x3,
    matmul,
    mul,
    reshape,
    rmsnorm,
    silu,
    transpose,
)

TIME_SCALE = 1000.0
MAX_PERIOD = 10_000.0
# Text rows can have mean-square near 1e-6; a 1e-6 guard would halve their variance.
TEXT_NORM_EPS = 1e-12


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor | None
    role: str

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    @property
    def dtype(self):
        return self.weight.dtype

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        if self.bias is not None:
            y = add(y, broadcast_to(self.bias, y.shape))
        return y


def expand_rows(v: Tensor, like: Tensor) -> Tensor:
    """Broadcast per-sample vectors ``[B, D]`` over the token axis of ``like`` ``[B, N, D]``."""
    B, D = v.shape
    return broadcast_to(reshape(v, (B, 1, D)), like.shape)


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    """``shift + (1 + scale) * x`` with per-sample ``shift``/``scale``."""
    return add(add(x, mul(x, expand_rows(scale, x))), expand_rows(shift, x))


def gated(x: Tensor, gate: Tensor) -> Tensor:
    return mul(x, expand_rows(gate, x))


@dataclass
class MixFFN:
    """Pointwise expansion -> 3x3 depthwise conv -> SiLU-gated GLU -> pointwise projection."""

    expand: Linear
    conv: Tensor  # [2*ffn_dim, 3, 3]
    project: Linear

    @property
    def hidden(self) -> int:
        return self.project.in_features

    def __call__(self, x: Tensor, grid: tuple[int, int]) -> Tensor:
        return mix_ffn(x, grid, self)


def mix_ffn(x: Tensor, grid: tuple[int, int], p: MixFFN) -> Tensor:
    ht, wt = grid
    batched = x.ndim == 3
    h = x if batched else reshape(x, (1,) + x.shape)
    B, N, _ = h.shape
    if N != ht * wt:
        raise GeometryError(f"mix_ffn: {N} tokens cannot form a {ht}x{wt} grid")
    h = p.expand(h)
    C2 = h.shape[-1]
    if p.conv.shape != (C2, 3, 3):
        raise DimensionError(f"mix_ffn: conv kernel {p.conv.shape} does not match {C2} channels")
    h = reshape(transpose(h, (0, 2, 1)), (B, C2, ht, wt))
    h = depthwise_conv3x3(h, p.conv)
    h = transpose(reshape(h, (B, C2, N)), (0, 2, 1))
    a, g = chunk(h, 2)
    y = p.project(mul(a, silu(g)))
    return y if batched else reshape(y, y.shape[1:])


@dataclass
class SelfAttention:
    qkv: Linear
    out: Linear
    heads: int
    eps: float = ATTN_EPS

    def __call__(self, x: Tensor) -> Tensor:
        qkv = self.qkv(x)
        q, k, v = chunk(qkv, 3)
        return self.out(linear_attention(q, k, v, heads=self.heads, eps=self.eps))


@dataclass
class CrossAttention:
    q: Linear
    kv: Linear
    out: Linear
    heads: int

    def __call__(self, x: Tensor, ctx: Tensor) -> Tensor:
        return cross_attention(x, ctx, self)


def cross_attention(x: Tensor, ctx: Tensor, p: CrossAttention) -> Tensor:
    """Softmax attention with image tokens as queries and text tokens as keys/values."""
    if ctx.shape[-2] == 0:
        raise ConditioningError("cross_attention needs at least one context token")
    batched = x.ndim == 3
    xq = x if batched else reshape(x, (1,) + x.shape)
    c = ctx if ctx.ndim == 3 else reshape(ctx, (1,) + ctx.shape)
    if c.shape[0] != xq.shape[0]:
        raise DimensionError(f"cross_attention: batch {xq.shape[0]} vs context batch {c.shape[0]}")
    k, v = chunk(p.kv(c), 2)
    out = p.out(softmax_attention_heads(p.q(xq), k, v, heads=p.heads))
    return out if batched else reshape(out, out.shape[1:])


def condition_text(emb: Tensor, gamma: Tensor, scale: Tensor, eps: float = TEXT_NORM_EPS) -> Tensor:
    """RMS-normalize text embeddings and multiply by a learnable scalar."""
    return mul(scale, rmsnorm(emb, gamma, eps))


def sinusoidal_features(t, dim: int, dtype=np.float64) -> np.ndarray:
    """``[B, dim]`` cosine/sine features of ``t * 1000``; ``t`` must lie in [0, 1]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if t.ndim != 1:
        raise DimensionError(f"timesteps must be a scalar or 1-D array, got shape {t.shape}")
    if np.any((t < 0) | (t > 1)) or not np.all(np.isfinite(t)):
        raise DomainError(f"timesteps must lie in [0, 1], got range [{t.min()}, {t.max()}]")
    half = dim // 2
    freqs = np.exp(-math.log(MAX_PERIOD) * np.arange(half) / half)
    args = (t * TIME_SCALE)[:, None] * freqs[None, :]
    feats = np.concatenate([np.cos(args), np.sin(args)], axis=1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros((t.size, 1))], axis=1)
    return feats.astype(dtype)


@dataclass
class TimestepEmbedder:
    fc1: Linear
    fc2: Linear

    @property
    def freq_dim(self) -> int:
        return self.fc1.in_features

    def __call__(self, t) -> Tensor:
        feats = Tensor(sinusoidal_features(t, self.freq_dim, self.fc1.dtype))
        return self.fc2(silu(self.fc1(feats)))


def timestep_embed(t, embedder: TimestepEmbedder) -> Tensor:
    """Embedding of scalar ``t`` as a ``[width]`` tensor (``[B, width]`` for arrays)."""
    out = embedder(t)
    return reshape(out, out.shape[1:]) if np.ndim(t) == 0 else out


def modulation_params(t_mod: Tensor, table: Tensor, parts: int) -> list[Tensor]:
    """Split ``t_mod + table`` into ``parts`` per-sample vectors.

    ``t_mod`` is the shared ``[B, parts*width]`` timestep projection and
    ``table`` the block's own learnable ``[parts, width]`` offsets.
    """
    B = t_mod.shape[0]
    flat = broadcast_to(reshape(table, (1, table.size)), (B, table.size))
    return chunk(add(t_mod, flat), parts)


def shift_scale_gate(t_mod: Tensor, table: Tensor) -> tuple[tuple[Tensor, Tensor, Tensor], tuple[Tensor, Tensor, Tensor]]:
    """``((shift, scale, gate) for attention, (shift, scale, gate) for the FFN)``."""
    s1, c1, g1, s2, c2, g2 = modulation_params(t_mod, table, 6)
    return (s1, c1, g1), (s2, c2, g2)


def prenorm(x: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Parameter-free RMS normalization used ahead of every modulated sub-block."""
    return rmsnorm(x, None, eps)
