"""Run configuration: nested sections, JSON round trip and a stable hash."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from lindit.blocks.checkpoint import config_hash
from lindit.blocks.geometry import LatentGeometry
from lindit.blocks.model import LinearDiTConfig
from lindit.errors import ConfigError
from lindit.flow import T_MIN, DDPMSchedule, FlowSchedule, Schedule

TASKS = ("bench-attn", "train", "sample", "quantize", "caption-demo")
OBJECTIVES = ("fm", "ddpm")
RUN_CONFIG_FILE = "run_config.json"


@dataclass(frozen=True)
class ScheduleSection:
    objective: str = "fm"
    s: float = 1.0
    t_min: float = T_MIN
    steps: tuple[int, ...] = (20,)
    samplers: tuple[str, ...] = ("dpm",)

    def build(self) -> Schedule:
        if self.objective == "fm":
            return FlowSchedule(self.s)
        if self.objective == "ddpm":
            return DDPMSchedule()
        raise ConfigError(f"unknown objective {self.objective!r}; choose from {OBJECTIVES}")


@dataclass(frozen=True)
class OptimizerSection:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    iters: int = 2000
    batch: int = 256
    checkpoint_every: int = 500


@dataclass(frozen=True)
class DatasetSection:
    name: str = "eight_gaussians2d"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BenchSection:
    Ns: tuple[int, ...] = (256, 1024, 4096)
    d: int = 64
    variants: tuple[str, ...] = ("naive", "streaming", "fused", "softmax")
    reps: int = 5
    heads: int = 1
    elem_type: str = "f32"
    naive_max_n: int = 1024


@dataclass(frozen=True)
class SampleSection:
    draws: int = 2048
    eval_draws: int = 2048
    oracle: dict | None = None  # {"kind": "gaussian", "mu0": 2.0, "sigma0": 0.5}
    final_readout: bool = False
    max_images: int = 16


@dataclass(frozen=True)
class QuantSection:
    exempt: tuple[str, ...] = ("norm", "linear_attention", "cross.kv")
    probes: int = 64


@dataclass(frozen=True)
class CaptionSection:
    path: str | None = None
    temperature: float = 0.1  # 0 selects argmax mode
    draws: int = 100_000


SECTIONS = {
    "schedule": ScheduleSection, "optimizer": OptimizerSection, "dataset": DatasetSection,
    "bench": BenchSection, "sample": SampleSection, "quant": QuantSection, "captions": CaptionSection,
}

DEFAULT_MODEL = {"width": 32, "depth": 2, "ffn_dim": 64, "heads": 2, "cond_dim": 8, "freq_dim": 32,
                 "elem_type": "f32"}
DEFAULT_GEOMETRY = {"H": 1, "W": 1, "F": 1, "C": 2, "P": 1}
IMAGE_GEOMETRY = {"H": 16, "W": 16, "F": 1, "C": 1, "P": 2}


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {where!r} must be an object")
    names = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    kwargs = {}
    for k, v in raw.items():
        default = getattr(cls(), k)
        kwargs[k] = tuple(v) if isinstance(default, tuple) and isinstance(v, list) else v
    return cls(**kwargs)


@dataclass(frozen=True)
class RunConfig:
    task: str = "train"
    seed: int = 0
    out: str = "runs/default"
    model: dict = field(default_factory=lambda: dict(DEFAULT_MODEL))
    geometry: dict = field(default_factory=lambda: dict(DEFAULT_GEOMETRY))
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    bench: BenchSection = field(default_factory=BenchSection)
    sample: SampleSection = field(default_factory=SampleSection)
    quant: QuantSection = field(default_factory=QuantSection)
    captions: CaptionSection = field(default_factory=CaptionSection)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; choose from {TASKS}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        self.model_config()
        self.latent_geometry()

    def model_config(self) -> LinearDiTConfig:
        return LinearDiTConfig.from_dict(self.model)

    def latent_geometry(self) -> LatentGeometry:
        try:
            return LatentGeometry(**self.geometry)
        except TypeError as exc:
            raise ConfigError(f"bad geometry {self.geometry}: {exc}") from exc

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("run config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        kwargs = {k: v for k, v in raw.items() if k not in SECTIONS}
        for name, sec in SECTIONS.items():
            kwargs[name] = _section(sec, raw.get(name), name)
        if "model" in raw:
            kwargs["model"] = {**DEFAULT_MODEL, **raw["model"]}
        if "geometry" in raw:
            kwargs["geometry"] = {**DEFAULT_GEOMETRY, **raw["geometry"]}
        return cls(**kwargs)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def digest(self) -> str:
        """Hash of everything except the output location."""
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)


def write_run_config(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RUN_CONFIG_FILE
    payload = {"config_hash": cfg.digest(), "config": cfg.to_dict()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
