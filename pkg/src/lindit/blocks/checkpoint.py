"""Checkpoint directory: ``manifest.json`` plus one raw little-endian ``tensors.bin``.

Manifest layout::

    {"format": "lindit-checkpoint", "version": 1,
     "config": {...}, "geometry": {...}, "config_hash": "<sha256>",
     "extra": {...},
     "tensors": [{"name", "shape", "dtype": "<f4"|"<f8", "offset", "nbytes"}, ...]}

Tensors are stored in parameter order, contiguous, C-ordered.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from lindit.blocks.geometry import LatentGeometry
from lindit.blocks.model import LinearDiTConfig, LinearDiTModel
from lindit.errors import DataError
from lindit.numerics import Tensor

FORMAT = "lindit-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(model: LinearDiTModel, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    tmp = path / (BLOB + ".tmp")
    with open(tmp, "wb") as fh:
        for name, p in model.params.items():
            arr = np.asarray(p.data).astype(p.data.dtype.newbyteorder("<"), order="C")
            raw = arr.tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    tmp.replace(path / BLOB)
    cfg = model.cfg.to_dict()
    geom = model.geometry.to_dict()
    manifest = {"format": FORMAT, "version": VERSION, "config": cfg, "geometry": geom,
                "config_hash": config_hash({"config": cfg, "geometry": geom}),
                "extra": extra or {}, "tensors": entries}
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {path} has no {MANIFEST}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint manifest {path / MANIFEST} is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint format {manifest.get('format')!r} "
                        f"version {manifest.get('version')!r}")
    return manifest


def load_checkpoint(path) -> LinearDiTModel:
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {path} has no {BLOB}") from exc
    cfg = LinearDiTConfig.from_dict(manifest["config"])
    geom = LatentGeometry(**manifest["geometry"])
    params = {}
    for e in manifest["tensors"]:
        end = e["offset"] + e["nbytes"]
        if end > len(blob):
            raise DataError(f"tensor {e['name']} extends past end of {BLOB}")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=e["nbytes"] // np.dtype(e["dtype"]).itemsize,
                            offset=e["offset"]).reshape(e["shape"])
        params[e["name"]] = Tensor(arr.astype(arr.dtype.newbyteorder("=")), requires_grad=True, name=e["name"])
    return LinearDiTModel(cfg, geom, params)
