"""CSV, JSON and plain-PGM writers with stable, documented layouts."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from lindit.errors import DataError

# Columns holding run-time measurements; everything else must reproduce bitwise.
TIMING_COLUMNS = frozenset({"wall_ms", "median_ms", "allocs_bytes"})

SCHEMAS = {
    "attn_bench.csv": ("variant", "N", "d", "median_ms", "allocs_bytes"),
    "attn_checks.csv": ("N", "streaming_vs_naive"),
    "train_log.csv": ("iter", "loss", "grad_norm", "wall_ms"),
    "sample_report.csv": ("sampler", "steps", "shift", "metric_name", "metric_value", "wall_ms"),
    "fidelity.csv": ("layer", "cos_sim", "max_abs_err", "quantized"),
    "freq_report.csv": ("image_id", "caption_index", "clip_score", "probability", "frequency", "max_abs_diff"),
}


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest round-trip form
    return str(v)


def write_csv(path, rows, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])
    return path


def read_csv(path) -> tuple[list[str], list[dict]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration as exc:
            raise DataError(f"{path} is empty") from exc
        return header, [dict(zip(header, row)) for row in reader]


def validate_csv(path, columns=None) -> list[dict]:
    """Check a CSV against its schema by file name (or an explicit column list)."""
    path = Path(path)
    cols = tuple(columns) if columns is not None else SCHEMAS.get(path.name)
    if cols is None:
        raise DataError(f"no schema registered for {path.name}")
    header, rows = read_csv(path)
    if tuple(header) != cols:
        raise DataError(f"{path.name}: header {header} does not match schema {list(cols)}")
    for i, r in enumerate(rows, 2):
        if len(r) != len(cols) or None in r.values():
            raise DataError(f"{path.name} line {i}: wrong number of fields")
    return rows


def numeric_columns(path) -> dict[str, list[str]]:
    """Raw text of every non-timing column, for bitwise comparisons between runs."""
    header, rows = read_csv(path)
    return {c: [r[c] for r in rows] for c in header if c not in TIMING_COLUMNS}


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_points(path, points: np.ndarray) -> Path:
    pts = np.asarray(points, dtype=np.float64)
    pts = pts.reshape(len(pts), -1)
    cols = ("x",) if pts.shape[1] == 1 else ("x", "y") if pts.shape[1] == 2 else \
        tuple(f"x{i}" for i in range(pts.shape[1]))
    return write_csv(path, [dict(zip(cols, map(float, row))) for row in pts], cols)


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> Path:
    """Plain (P2) greyscale PGM from values in [0, 1]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"PGM needs a 2-D image, got shape {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(int)
    h, w = q.shape
    lines = ["P2", f"{w} {h}", str(maxval)] + [" ".join(map(str, row)) for row in q]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_pgm(path) -> tuple[np.ndarray, int]:
    tokens = []
    for line in Path(path).read_text(encoding="ascii").splitlines():
        tokens += line.split("#", 1)[0].split()
    if not tokens or tokens[0] != "P2":
        raise DataError(f"{path}: missing P2 magic")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        vals = np.array([int(t) for t in tokens[4:]])
    except (IndexError, ValueError) as exc:
        raise DataError(f"{path}: malformed PGM header or body") from exc
    if vals.size != w * h:
        raise DataError(f"{path}: expected {w * h} pixels, found {vals.size}")
    if maxval < 1 or vals.min(initial=0) < 0 or vals.max(initial=0) > maxval:
        raise DataError(f"{path}: pixel values outside [0, {maxval}]")
    return vals.reshape(h, w), maxval
