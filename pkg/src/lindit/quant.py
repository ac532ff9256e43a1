"""W8A8 post-training quantization: per-token activations, per-channel weights.

Both use symmetric int8 in [-127, 127] with round-half-to-even. Products
accumulate in int32 and are rescaled once per output element.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lindit.blocks.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from lindit.blocks.layers import Linear
from lindit.blocks.model import LinearDiTModel
from lindit.errors import ConfigError, DimensionError, NumericError, QuantizationError
from lindit.numerics import Tensor

QMAX = 127
SENTINEL_SCALE = float(np.finfo(np.float64).eps)
PER_TOKEN, PER_CHANNEL = "per_token", "per_channel"
REPORT_COLUMNS = ("layer", "cos_sim", "max_abs_err", "quantized")

LINEAR_ROLES = frozenset({
    "x_embed", "t_embed.fc1", "t_embed.fc2", "t_block", "y_proj",
    "attn.qkv", "attn.out", "cross.q", "cross.kv", "cross.out",
    "ffn.expand", "ffn.project", "final.linear",
})
# Non-linear components that a policy may name; they never hold int8 weights.
FP_ONLY_ROLES = frozenset({"norm", "linear_attention", "conv", "modulation"})
KNOWN_ROLES = LINEAR_ROLES | FP_ONLY_ROLES
DEFAULT_EXEMPT = frozenset({"norm", "linear_attention", "cross.kv"})


@dataclass(frozen=True)
class QuantTensor:
    values: np.ndarray  # int8
    scales: np.ndarray  # float64, one per row (per_token) or column (per_channel)
    axis: str

    @property
    def shape(self):
        return self.values.shape


def _as_array(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.ndim != 2:
        raise DimensionError(f"quantization expects a 2-D array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("cannot quantize non-finite values")
    return arr.astype(np.float64, copy=False)


def _quantize(arr: np.ndarray, reduce_axis: int) -> tuple[np.ndarray, np.ndarray]:
    amax = np.max(np.abs(arr), axis=reduce_axis, keepdims=True)
    zero = amax == 0
    safe = np.where(zero, 1.0, amax)
    # divide by the max first so c*x and x give the same ratios
    q = np.clip(np.rint(arr / safe * QMAX), -QMAX, QMAX).astype(np.int8)
    scales = np.where(zero, SENTINEL_SCALE, amax / QMAX)
    return q, scales.reshape(-1)


def quantize_per_token(x) -> QuantTensor:
    q, s = _quantize(_as_array(x), 1)
    return QuantTensor(q, s, PER_TOKEN)


def quantize_per_channel(w) -> QuantTensor:
    q, s = _quantize(_as_array(w), 0)
    return QuantTensor(q, s, PER_CHANNEL)


def dequantize(qt: QuantTensor) -> np.ndarray:
    v = qt.values.astype(np.float64)
    return v * (qt.scales[:, None] if qt.axis == PER_TOKEN else qt.scales[None, :])


def qgemm(qa: QuantTensor, qw: QuantTensor) -> np.ndarray:
    """Int32-accumulated product of a per-token activation and a per-channel weight."""
    if qa.axis != PER_TOKEN or qw.axis != PER_CHANNEL:
        raise ConfigError(f"qgemm needs (per_token, per_channel) operands, got ({qa.axis}, {qw.axis})")
    d_in = qa.shape[1]
    if qw.shape[0] != d_in:
        raise DimensionError(f"qgemm inner dimensions differ: {qa.shape} x {qw.shape}")
    if d_in * QMAX * QMAX >= 2**31:
        raise NumericError(f"int32 accumulator could overflow for inner dimension {d_in}")
    acc = qa.values.astype(np.int32) @ qw.values.astype(np.int32)
    return acc.astype(np.float64) * qa.scales[:, None] * qw.scales[None, :]


class QuantLinear:
    """Drop-in replacement for :class:`Linear` running the W8A8 path (inference only)."""

    def __init__(self, layer: Linear, qweight: QuantTensor | None = None):
        self.role = layer.role
        self.qweight = quantize_per_channel(layer.weight) if qweight is None else qweight
        if self.qweight.shape != layer.weight.shape or self.qweight.axis != PER_CHANNEL:
            raise DimensionError(f"stored int8 weight {self.qweight.shape} does not fit layer {layer.weight.shape}")
        self.bias = layer.bias
        self.source = layer

    @property
    def in_features(self) -> int:
        return self.qweight.shape[0]

    @property
    def out_features(self) -> int:
        return self.qweight.shape[1]

    @property
    def dtype(self):
        return self.source.dtype

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        rows = x.data.reshape(-1, x.shape[-1])
        y = qgemm(quantize_per_token(rows), self.qweight)
        if self.bias is not None:
            y = y + self.bias.data
        return Tensor(y.reshape(lead + (self.out_features,)).astype(x.dtype))


@dataclass(frozen=True)
class QuantPolicy:
    exempt: frozenset = DEFAULT_EXEMPT

    def __post_init__(self):
        unknown = set(self.exempt) - KNOWN_ROLES
        if unknown:
            raise ConfigError(f"unknown layer roles in quantization policy: {sorted(unknown)}")
        object.__setattr__(self, "exempt", frozenset(self.exempt))

    @classmethod
    def exempt_all(cls) -> "QuantPolicy":
        return cls(KNOWN_ROLES)

    def quantizes(self, role: str) -> bool:
        if role not in KNOWN_ROLES:
            raise ConfigError(f"unknown layer role {role!r}")
        return role in LINEAR_ROLES and role not in self.exempt

    def to_dict(self) -> dict:
        return {"exempt": sorted(self.exempt)}


def quantize_model(model: LinearDiTModel, policy: QuantPolicy | None = None) -> LinearDiTModel:
    """A new model sharing the float parameters, with non-exempt projections swapped for W8A8 layers."""
    policy = policy or QuantPolicy()
    qmodel = LinearDiTModel(model.cfg, model.geometry, model.params)
    for key, layer in qmodel.linear_layers().items():
        if policy.quantizes(layer.role):
            qmodel.replace_linear(key, QuantLinear(layer))
    return qmodel


def quantized_layers(model: LinearDiTModel) -> dict[str, str]:
    """Layer key -> role for every projection running the int8 path."""
    return {k: l.role for k, l in model.linear_layers().items() if isinstance(l, QuantLinear)}


def cosine_similarity(a, b) -> float:
    a, b = np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


class _Recorder:
    def __init__(self, layer, sink: list):
        self.layer, self.sink, self.role = layer, sink, layer.role

    def __getattr__(self, name):
        return getattr(self.layer, name)

    def __call__(self, x: Tensor) -> Tensor:
        self.sink.append(x.data.copy())
        return self.layer(x)


def fidelity_report(model: LinearDiTModel, qmodel: LinearDiTModel, probes) -> list[dict]:
    """Per-layer and end-to-end agreement of float vs quantized forward passes.

    ``probes`` is ``(x_t, t, ctx)`` with batched arrays. Each quantized layer
    is compared on the inputs it receives inside the float forward pass, so
    its row isolates that layer's own quantization error.
    """
    x_t, t, ctx = probes
    x_t, ctx = Tensor(np.asarray(x_t)), Tensor(np.asarray(ctx))
    qkeys = quantized_layers(qmodel)
    captured = {k: [] for k in qkeys}
    tap = LinearDiTModel(model.cfg, model.geometry, model.params)
    for key, layer in tap.linear_layers().items():
        if key in captured:
            tap.replace_linear(key, _Recorder(layer, captured[key]))
    ref = tap(x_t, t, ctx).data
    rows = []
    fp_layers, q_layers = model.linear_layers(), qmodel.linear_layers()
    for key in qkeys:
        fp_out, q_out = [], []
        for inp in captured[key]:
            fp_out.append(fp_layers[key](Tensor(inp)).data.ravel())
            q_out.append(q_layers[key](Tensor(inp)).data.ravel())
        a, b = np.concatenate(fp_out), np.concatenate(q_out)
        rows.append({"layer": key, "cos_sim": cosine_similarity(b, a),
                     "max_abs_err": float(np.max(np.abs(b - a))), "quantized": True})
    out = qmodel(x_t, t, ctx).data
    rows.append({"layer": "end_to_end", "cos_sim": cosine_similarity(out, ref),
                 "max_abs_err": float(np.max(np.abs(out - ref))), "quantized": bool(qkeys)})
    return rows


QMANIFEST = "quantization.json"
QBLOB = "qweights.bin"


def save_quantized(qmodel: LinearDiTModel, path, policy: QuantPolicy, extra: dict | None = None) -> Path:
    """Float checkpoint (for exempt layers and biases) plus int8 weights and f64 scales."""
    path = save_checkpoint(qmodel, path, extra)
    entries, offset = [], 0
    with open(path / QBLOB, "wb") as fh:
        for key, layer in qmodel.linear_layers().items():
            if not isinstance(layer, QuantLinear):
                continue
            vals = np.ascontiguousarray(layer.qweight.values, dtype=np.int8).tobytes()
            scales = np.ascontiguousarray(layer.qweight.scales, dtype="<f8").tobytes()
            fh.write(vals)
            fh.write(scales)
            entries.append({"layer": key, "role": layer.role, "shape": list(layer.qweight.shape),
                            "offset": offset, "values_nbytes": len(vals), "scales_nbytes": len(scales)})
            offset += len(vals) + len(scales)
    meta = {"policy": policy.to_dict(), "layers": entries}
    (path / QMANIFEST).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_quantized(path) -> LinearDiTModel:
    path = Path(path)
    read_manifest(path)
    try:
        meta = json.loads((path / QMANIFEST).read_text())
        blob = (path / QBLOB).read_bytes()
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        raise QuantizationError(f"{path} is not a quantized checkpoint: {exc}") from exc
    model = load_checkpoint(path)
    layers = model.linear_layers()
    for e in meta["layers"]:
        o, nv, ns = e["offset"], e["values_nbytes"], e["scales_nbytes"]
        if o + nv + ns > len(blob) or e["layer"] not in layers:
            raise QuantizationError(f"corrupt quantized entry for {e['layer']}")
        vals = np.frombuffer(blob, np.int8, nv, o).reshape(e["shape"])
        scales = np.frombuffer(blob, "<f8", ns // 8, o + nv).astype(np.float64)
        model.replace_linear(e["layer"], QuantLinear(layers[e["layer"]], QuantTensor(vals, scales, PER_CHANNEL)))
    return model
