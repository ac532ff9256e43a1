"""Multi-caption records, the score-temperature caption sampler and prompt templating."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from lindit.errors import ConfigError, DataError, TemplateError

PLACEHOLDER = "{p}"
DEFAULT_TEMPERATURE = 0.1


@dataclass(frozen=True)
class Caption:
    text: str
    clip_score: float


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    captions: tuple[Caption, ...]

    def __post_init__(self):
        caps = tuple(self.captions)
        if not caps:
            raise DataError(f"record {self.image_id!r} has no captions")
        for c in caps:
            if not math.isfinite(c.clip_score):
                raise DataError(f"record {self.image_id!r}: clip score {c.clip_score} is not finite")
        object.__setattr__(self, "captions", caps)

    @property
    def scores(self) -> np.ndarray:
        return np.array([c.clip_score for c in self.captions], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"image_id": self.image_id,
                "captions": [{"text": c.text, "clip_score": c.clip_score} for c in self.captions]}

    @classmethod
    def from_dict(cls, obj) -> "CaptionRecord":
        if not isinstance(obj, dict):
            raise DataError("record must be a JSON object")
        if not isinstance(obj.get("image_id"), str):
            raise DataError("field 'image_id' missing or not a string")
        caps = obj.get("captions")
        if not isinstance(caps, list):
            raise DataError("field 'captions' missing or not a list")
        out = []
        for j, c in enumerate(caps):
            if not isinstance(c, dict) or not isinstance(c.get("text"), str):
                raise DataError(f"caption {j}: field 'text' missing or not a string")
            score = c.get("clip_score")
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                raise DataError(f"caption {j}: field 'clip_score' missing or not a number")
            out.append(Caption(c["text"], float(score)))
        return cls(obj["image_id"], tuple(out))


@dataclass(frozen=True)
class SamplerConfig:
    """``temperature=None`` selects argmax mode."""

    temperature: float | None = DEFAULT_TEMPERATURE
    seed: int = 0

    def __post_init__(self):
        t = self.temperature
        if t is not None and not (math.isfinite(t) and t > 0):
            raise ConfigError(f"temperature must be a positive finite number, got {t}")

    @classmethod
    def argmax(cls, seed: int = 0) -> "SamplerConfig":
        return cls(None, seed)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def _record(record) -> CaptionRecord:
    if isinstance(record, CaptionRecord):
        return record
    if not record:
        raise DataError("empty caption list")
    return CaptionRecord("", tuple(c if isinstance(c, Caption) else Caption(*c) for c in record))


def caption_probs(record, temperature: float) -> np.ndarray:
    if not (temperature > 0 and math.isfinite(temperature)):
        raise ConfigError(f"temperature must be a positive finite number, got {temperature}")
    z = _record(record).scores / temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def argmax_index(record) -> int:
    return int(np.argmax(_record(record).scores))  # first maximum wins ties


def sample_indices(record, cfg: SamplerConfig, draws: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """``draws`` independent indices in one vectorised pass (same law as :func:`sample_index`)."""
    rec = _record(record)
    if draws < 0:
        raise ConfigError("draws must be non-negative")
    if cfg.temperature is None or len(rec.captions) == 1:
        return np.full(draws, argmax_index(rec) if cfg.temperature is None else 0, dtype=np.int64)
    rng = cfg.rng() if rng is None else rng
    cdf = np.cumsum(caption_probs(rec, cfg.temperature))
    u = rng.random(draws) * cdf[-1]
    return np.searchsorted(cdf, u, side="right").clip(0, len(cdf) - 1)


def sample_index(record, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> int:
    return int(sample_indices(record, cfg, 1, rng)[0])


def sample_caption(record, cfg: SamplerConfig, rng: np.random.Generator | None = None) -> Caption:
    rec = _record(record)
    return rec.captions[sample_index(rec, cfg, rng)]


def default_template() -> str:
    return resources.files("lindit.assets").joinpath("chi_template.txt").read_text(encoding="utf-8")


def chi_wrap(user_prompt: str, template: str | None = None) -> str:
    template = default_template() if template is None else template
    n = template.count(PLACEHOLDER)
    if n != 1:
        raise TemplateError(f"template must contain exactly one {PLACEHOLDER} placeholder, found {n}")
    head, tail = template.split(PLACEHOLDER)
    return head + user_prompt + tail


def load_captions(path) -> list[CaptionRecord]:
    records, bad = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(CaptionRecord.from_dict(json.loads(line)))
            except json.JSONDecodeError as exc:
                bad.append(f"line {lineno}: invalid JSON ({exc.msg})")
            except DataError as exc:
                bad.append(f"line {lineno}: {exc}")
    if bad:
        raise DataError(f"{path}: " + "; ".join(bad))
    return records


def save_captions(records, path) -> None:
    with open(Path(path), "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), ensure_ascii=False) + "\n")
