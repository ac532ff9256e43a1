"""Linear DiT assembly: config, parameter inventory, deterministic init, forward."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from lindit.blocks.geometry import LatentGeometry, patchify, unpatchify
from lindit.blocks.layers import (
    CrossAttention,
    Linear,
    MixFFN,
    SelfAttention,
    TimestepEmbedder,
    condition_text,
    gated,
    modulate,
    prenorm,
    shift_scale_gate,
)
from lindit.errors import ConfigError, GeometryError
from lindit.numerics import Tensor, add, broadcast_to, narrow, reshape, resolve_dtype, silu

TEXT_SCALE_INIT = 0.01
INIT_STD = 0.02


@dataclass(frozen=True)
class LinearDiTConfig:
    width: int
    depth: int
    ffn_dim: int
    heads: int
    cond_dim: int
    freq_dim: int = 256
    elem_type: str = "f32"

    def __post_init__(self):
        for f in ("width", "depth", "ffn_dim", "heads", "cond_dim", "freq_dim"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive, got {getattr(self, f)}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by heads {self.heads}")
        resolve_dtype(self.elem_type)

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LinearDiTConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


# Reference architectures (width, depth, ffn, heads); cond_dim is the text-encoder width.
REFERENCE_CONFIGS = {
    "0.6B": LinearDiTConfig(width=1152, depth=28, ffn_dim=2880, heads=36, cond_dim=2304),
    "1.6B": LinearDiTConfig(width=2240, depth=20, ffn_dim=5600, heads=70, cond_dim=2304),
}


def _linear_shapes(name, d_in, d_out, bias=True):
    out = [(f"{name}.weight", (d_in, d_out))]
    if bias:
        out.append((f"{name}.bias", (d_out,)))
    return out


def param_shapes(cfg: LinearDiTConfig, g: LatentGeometry) -> dict[str, tuple[int, ...]]:
    """Ordered inventory of every learnable tensor. Contains no positional table."""
    w, f = cfg.width, cfg.ffn_dim
    items = []
    items += _linear_shapes("x_embed", g.token_dim, w)
    items += _linear_shapes("t_embed.fc1", cfg.freq_dim, w)
    items += _linear_shapes("t_embed.fc2", w, w)
    items += _linear_shapes("t_block", w, 6 * w)
    items += [("y_norm.gamma", (cfg.cond_dim,)), ("y_scale", ())]
    items += _linear_shapes("y_proj", cfg.cond_dim, w)
    for i in range(cfg.depth):
        p = f"blocks.{i}"
        items += _linear_shapes(f"{p}.attn.qkv", w, 3 * w, bias=False)
        items += _linear_shapes(f"{p}.attn.out", w, w, bias=False)
        items += _linear_shapes(f"{p}.cross.q", w, w)
        items += _linear_shapes(f"{p}.cross.kv", w, 2 * w)
        items += _linear_shapes(f"{p}.cross.out", w, w)
        items += _linear_shapes(f"{p}.ffn.expand", w, 2 * f)
        items.append((f"{p}.ffn.conv.weight", (2 * f, 3, 3)))
        items += _linear_shapes(f"{p}.ffn.project", f, w)
        items.append((f"{p}.modulation", (6, w)))
    items.append(("final.modulation", (2, w)))
    items += _linear_shapes("final.linear", w, g.token_dim)
    return dict(items)


def param_count_for(cfg: LinearDiTConfig, g: LatentGeometry) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg, g).values())


def _trunc_normal(rng, shape, std):
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return x * std


def _init_value(name: str, shape, cfg: LinearDiTConfig, rng) -> np.ndarray:
    if name.endswith(".bias") or name.startswith("t_block."):
        return np.zeros(shape)
    if name == "y_norm.gamma":
        return np.ones(shape)
    if name == "y_scale":
        return np.full(shape, TEXT_SCALE_INIT)
    if name.endswith(".modulation"):
        return rng.standard_normal(shape) / math.sqrt(cfg.width)
    if name.endswith("conv.weight"):
        return _trunc_normal(rng, shape, 1.0 / 3.0)
    return _trunc_normal(rng, shape, INIT_STD)


class LinearDiTModel:
    """Parameter container plus forward pass; parameters live in ``self.params``."""

    def __init__(self, cfg: LinearDiTConfig, geometry: LatentGeometry, params: dict[str, Tensor]):
        expected = param_shapes(cfg, geometry)
        if list(params) != list(expected):
            missing = set(expected) - set(params)
            extra = set(params) - set(expected)
            raise ConfigError(f"parameter set mismatch; missing={sorted(missing)} extra={sorted(extra)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.cfg = cfg
        self.geometry = geometry
        self.params = params
        self.dtype = resolve_dtype(cfg.elem_type)
        self._assemble()

    def _lin(self, name: str, role: str) -> Linear:
        return Linear(self.params[f"{name}.weight"], self.params.get(f"{name}.bias"), role)

    def _assemble(self) -> None:
        cfg, P = self.cfg, self.params
        self.x_embed = self._lin("x_embed", "x_embed")
        self.t_embedder = TimestepEmbedder(self._lin("t_embed.fc1", "t_embed.fc1"),
                                           self._lin("t_embed.fc2", "t_embed.fc2"))
        self.t_block = self._lin("t_block", "t_block")
        self.y_gamma = P["y_norm.gamma"]
        self.y_scale = P["y_scale"]
        self.y_proj = self._lin("y_proj", "y_proj")
        self.blocks = []
        for i in range(cfg.depth):
            p = f"blocks.{i}"
            self.blocks.append({
                "attn": SelfAttention(self._lin(f"{p}.attn.qkv", "attn.qkv"),
                                      self._lin(f"{p}.attn.out", "attn.out"), cfg.heads),
                "cross": CrossAttention(self._lin(f"{p}.cross.q", "cross.q"),
                                        self._lin(f"{p}.cross.kv", "cross.kv"),
                                        self._lin(f"{p}.cross.out", "cross.out"), cfg.heads),
                "ffn": MixFFN(self._lin(f"{p}.ffn.expand", "ffn.expand"), P[f"{p}.ffn.conv.weight"],
                              self._lin(f"{p}.ffn.project", "ffn.project")),
                "modulation": P[f"{p}.modulation"],
            })
        self.final_table = P["final.modulation"]
        self.final = self._lin("final.linear", "final.linear")

    # -- introspection -----------------------------------------------------

    def linear_layers(self) -> dict[str, Linear]:
        """Every projection keyed by its parameter prefix (e.g. ``blocks.0.cross.kv``)."""
        out = {"x_embed": self.x_embed, "t_embed.fc1": self.t_embedder.fc1,
               "t_embed.fc2": self.t_embedder.fc2, "t_block": self.t_block, "y_proj": self.y_proj}
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}"
            out[f"{p}.attn.qkv"] = blk["attn"].qkv
            out[f"{p}.attn.out"] = blk["attn"].out
            out[f"{p}.cross.q"] = blk["cross"].q
            out[f"{p}.cross.kv"] = blk["cross"].kv
            out[f"{p}.cross.out"] = blk["cross"].out
            out[f"{p}.ffn.expand"] = blk["ffn"].expand
            out[f"{p}.ffn.project"] = blk["ffn"].project
        out["final.linear"] = self.final
        return out

    def replace_linear(self, key: str, layer) -> None:
        if key in ("x_embed", "t_block", "y_proj"):
            setattr(self, key, layer)
        elif key.startswith("t_embed."):
            setattr(self.t_embedder, key.split(".")[1], layer)
        elif key == "final.linear":
            self.final = layer
        else:
            _, i, sub, attr = key.split(".")
            blk = self.blocks[int(i)]
            setattr(blk[sub] if sub != "ffn" else blk["ffn"], attr, layer)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # -- forward -----------------------------------------------------------

    def embed_context(self, ctx: Tensor, batch: int) -> Tensor:
        if ctx.ndim == 2:
            ctx = broadcast_to(reshape(ctx, (1,) + ctx.shape), (batch,) + ctx.shape)
        if ctx.shape[0] != batch or ctx.shape[-1] != self.cfg.cond_dim:
            raise GeometryError(f"context shape {ctx.shape} incompatible with batch {batch}, "
                                f"cond_dim {self.cfg.cond_dim}")
        return self.y_proj(condition_text(ctx, self.y_gamma, self.y_scale))

    def forward(self, x_t: Tensor, t, ctx: Tensor) -> Tensor:
        """Velocity (or noise) prediction with the same shape as ``x_t``.

        ``x_t`` is ``[C, h, w]`` or ``[B, C, h, w]``; ``t`` a scalar or ``[B]``
        array in [0, 1]; ``ctx`` ``[L, cond_dim]`` (shared) or ``[B, L, cond_dim]``.
        """
        g = self.geometry
        single = x_t.ndim == 3
        x = reshape(x_t, (1,) + x_t.shape) if single else x_t
        if x.shape[1:] != (g.C,) + g.latent_hw:
            raise GeometryError(f"latent shape {x_t.shape} does not match geometry "
                                f"(C={g.C}, hw={g.latent_hw})")
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        tokens = self.x_embed(patchify(x, g.P))
        t_emb = self.t_embedder(t)
        t_mod = self.t_block(silu(t_emb))
        y = self.embed_context(ctx, B)
        grid = g.grid
        for blk in self.blocks:
            (s1, c1, g1), (s2, c2, g2) = shift_scale_gate(t_mod, blk["modulation"])
            h = blk["attn"](modulate(prenorm(tokens), s1, c1))
            tokens = add(tokens, gated(h, g1))
            tokens = add(tokens, blk["cross"](tokens, y))
            h = blk["ffn"](modulate(prenorm(tokens), s2, c2), grid)
            tokens = add(tokens, gated(h, g2))
        w = self.cfg.width
        table = broadcast_to(reshape(self.final_table, (1, 2 * w)), (B, 2 * w))
        shift = add(t_emb, narrow(table, 0, w))
        scale = add(t_emb, narrow(table, w, 2 * w))
        out = self.final(modulate(prenorm(tokens), shift, scale))
        out = unpatchify(out, g.P, g.C, grid)
        return reshape(out, out.shape[1:]) if single else out

    __call__ = forward


def build_model(cfg: LinearDiTConfig, g: LatentGeometry, seed: int = 0) -> LinearDiTModel:
    rng = np.random.default_rng(seed)
    dtype = resolve_dtype(cfg.elem_type)
    params = {}
    for name, shape in param_shapes(cfg, g).items():
        params[name] = Tensor(_init_value(name, shape, cfg, rng).astype(dtype), requires_grad=True, name=name)
    return LinearDiTModel(cfg, g, params)


def param_count(model: LinearDiTModel) -> int:
    return sum(p.size for p in model.params.values())


def forward(model: LinearDiTModel, x_t: Tensor, t, ctx: Tensor) -> Tensor:
    return model.forward(x_t, t, ctx)
