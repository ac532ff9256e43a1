"""Linear DiT building blocks and model assembly."""

from lindit.blocks.checkpoint import config_hash, load_checkpoint, read_manifest, save_checkpoint
from lindit.blocks.geometry import LatentGeometry, patchify, token_count, unpatchify
from lindit.blocks.layers import (
    CrossAttention,
    Linear,
    MixFFN,
    SelfAttention,
    TimestepEmbedder,
    condition_text,
    cross_attention,
    gated,
    mix_ffn,
    modulate,
    modulation_params,
    prenorm,
    shift_scale_gate,
    sinusoidal_features,
    timestep_embed,
)
from lindit.blocks.model import (
    REFERENCE_CONFIGS,
    LinearDiTConfig,
    LinearDiTModel,
    build_model,
    forward,
    param_count,
    param_count_for,
    param_shapes,
)

__all__ = [
    "REFERENCE_CONFIGS", "CrossAttention", "LatentGeometry", "Linear", "LinearDiTConfig", "LinearDiTModel",
    "MixFFN", "SelfAttention", "TimestepEmbedder", "build_model", "condition_text", "config_hash",
    "cross_attention", "forward", "gated", "load_checkpoint", "mix_ffn", "modulate", "modulation_params",
    "param_count", "param_count_for", "param_shapes", "patchify", "prenorm", "read_manifest",
    "save_checkpoint", "shift_scale_gate", "sinusoidal_features", "timestep_embed", "token_count",
    "unpatchify",
]
