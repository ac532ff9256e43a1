"""One function per CLI subcommand. Each writes its artifacts plus ``run_config.json`` into ``cfg.out``."""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from lindit.blocks.checkpoint import load_checkpoint, read_manifest, save_checkpoint
from lindit.blocks.model import LinearDiTModel, build_model
from lindit.captions import SamplerConfig, argmax_index, caption_probs, load_captions, sample_indices
from lindit.errors import ConfigError, DivergenceError, NumericError
from lindit.flow import DDPMSchedule, FlowSchedule, Schedule, forward_marginal, gaussian_flow_map, \
    gaussian_oracle_velocity, objective_loss, sample_batch, timestep_grid
from lindit.harness.artifacts import SCHEMAS, write_csv, write_json, write_pgm, write_points
from lindit.harness.bench import bench_attention
from lindit.harness.config import RunConfig, write_run_config
from lindit.harness.datasets import ToyDataset
from lindit.harness.metrics import energy_distance
from lindit.harness.optim import Adam, grad_norm
from lindit.numerics import Tape, Tensor
from lindit.quant import QuantPolicy, fidelity_report, quantize_model, quantized_layers, save_quantized
from lindit.solver import SAMPLERS, run_sampler

# independent generator streams derived from the run seed
STREAM_DATA, STREAM_NOISE, STREAM_HELDOUT, STREAM_SAMPLE, STREAM_PROBES = 1, 2, 3, 4, 5
FIELD_CHUNK = 4096


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def null_context(model: LinearDiTModel) -> Tensor:
    """The toy tasks are unconditional: a single all-zero text token."""
    return Tensor(np.zeros((1, model.cfg.cond_dim), dtype=model.dtype))


def model_field(model: LinearDiTModel, chunk: int = FIELD_CHUNK):
    """Wrap a model as ``f(x: ndarray, t) -> ndarray`` for the samplers."""
    ctx = null_context(model)

    def f(x, t):
        x = np.asarray(x)
        out = np.empty(x.shape, dtype=np.float64)
        for i in range(0, len(x), chunk):
            out[i:i + chunk] = model(Tensor(x[i:i + chunk].astype(model.dtype)), t, ctx).data
        return out

    return f


def schedule_from_dict(d: dict) -> Schedule:
    if d.get("objective") == "fm":
        return FlowSchedule(d.get("s", 1.0))
    if d.get("objective") == "ddpm":
        return DDPMSchedule(d.get("offset", 0.008), d.get("floor", 1e-5))
    raise ConfigError(f"unknown schedule {d}")


def _dataset(cfg: RunConfig, stream: int, name=None, params=None) -> ToyDataset:
    return ToyDataset(name or cfg.dataset.name, cfg.dataset.params if params is None else params,
                      seed=[cfg.seed, stream])


def _check_shapes(cfg: RunConfig, data: ToyDataset) -> None:
    g = cfg.latent_geometry()
    if (g.C,) + g.latent_hw != data.latent_shape:
        raise ConfigError(f"geometry C={g.C}, latent {g.latent_hw} does not fit dataset {data.name} "
                          f"with latent shape {data.latent_shape}")


def _existing_checkpoint(path) -> Path:
    if path is None:
        raise ConfigError("this command needs --checkpoint")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    return path


# -- bench-attn --------------------------------------------------------------


def cmd_bench_attn(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    write_run_config(cfg, out)
    b = cfg.bench
    rows, checks = bench_attention(b.Ns, d=b.d, variants=b.variants, reps=b.reps, heads=b.heads,
                                   elem_type=b.elem_type, seed=cfg.seed, check_max_n=b.naive_max_n)
    write_csv(out / "attn_bench.csv", rows, SCHEMAS["attn_bench.csv"])
    write_csv(out / "attn_checks.csv", checks, SCHEMAS["attn_checks.csv"])
    return {"rows": rows, "checks": checks}


# -- train -------------------------------------------------------------------


def _train_extra(cfg: RunConfig, sched: Schedule, it: int) -> dict:
    return {"run_config_hash": cfg.digest(), "iter": it, "schedule": sched.to_dict(),
            "dataset": {"name": cfg.dataset.name, "params": cfg.dataset.params}, "seed": cfg.seed}


def cmd_train(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    write_run_config(cfg, out)
    opt_cfg = cfg.optimizer
    if opt_cfg.kind != "adam":
        raise ConfigError(f"unknown optimizer {opt_cfg.kind!r}; only 'adam' is available")
    if opt_cfg.iters < 0 or opt_cfg.batch < 1:
        raise ConfigError("iters must be >= 0 and batch >= 1")
    sched = cfg.schedule.build()
    data = _dataset(cfg, STREAM_DATA)
    _check_shapes(cfg, data)
    model = build_model(cfg.model_config(), cfg.latent_geometry(), cfg.seed)
    ctx = null_context(model)
    noise_rng = _rng(cfg.seed, STREAM_NOISE)
    opt = Adam(model.parameters(), opt_cfg.lr, opt_cfg.beta1, opt_cfg.beta2, opt_cfg.eps)
    log = []
    ckpt = out / "checkpoint"
    for it in range(1, opt_cfg.iters + 1):
        t0 = time.perf_counter()
        batch = sample_batch(noise_rng, data.latents(opt_cfg.batch).astype(model.dtype), ctx)
        loss_val, gnorm, err = float("nan"), float("nan"), None
        try:
            with Tape() as tape:
                loss = objective_loss(model, batch, sched, step=it)
            tape.backward(loss)
            loss_val, gnorm = loss.item(), grad_norm(model.parameters())
        except NumericError as exc:
            err = exc
        if err is not None or not (np.isfinite(loss_val) and np.isfinite(gnorm)):
            # parameters have not been touched by this step, so they are the last good state
            opt.zero_grad()
            save_checkpoint(model, ckpt, {**_train_extra(cfg, sched, it - 1), "diverged_at": it})
            write_csv(out / "train_log.csv", log, SCHEMAS["train_log.csv"])
            write_json(out / "divergence.json", {"iter": it, "last_good_iter": it - 1, "loss": repr(loss_val),
                                                 "grad_norm": repr(gnorm), "error": str(err) if err else None})
            raise DivergenceError("training diverged; last good parameters saved to "
                                  f"{ckpt}", step=it)
        opt.step()
        opt.zero_grad()
        log.append({"iter": it, "loss": loss_val, "grad_norm": gnorm, "wall_ms": (time.perf_counter() - t0) * 1e3})
        if opt_cfg.checkpoint_every and it % opt_cfg.checkpoint_every == 0 and it != opt_cfg.iters:
            save_checkpoint(model, out / "checkpoints" / f"iter_{it:06d}", _train_extra(cfg, sched, it))
    save_checkpoint(model, ckpt, _train_extra(cfg, sched, opt_cfg.iters))
    write_csv(out / "train_log.csv", log, SCHEMAS["train_log.csv"])
    return {"model": model, "log": log, "checkpoint": ckpt}


# -- sample ------------------------------------------------------------------


def _gaussian_oracle(cfg: RunConfig):
    o = dict(cfg.sample.oracle)
    if o.pop("kind", "gaussian") != "gaussian":
        raise ConfigError("only the gaussian oracle is available")
    mu0, sigma0 = float(o.pop("mu0", 2.0)), float(o.pop("sigma0", 0.5))
    if o:
        raise ConfigError(f"unknown oracle keys {sorted(o)}")
    sched = FlowSchedule(cfg.schedule.s)
    return sched, (lambda x, t: gaussian_oracle_velocity(x, t, mu0, sigma0, sched)), mu0, sigma0


def cmd_sample(cfg: RunConfig, checkpoint=None) -> dict:
    out = Path(cfg.out)
    sc = cfg.schedule
    for name in sc.samplers:
        if name not in SAMPLERS:
            raise ConfigError(f"unknown sampler {name!r}; choose from {SAMPLERS}")
    if not sc.steps or min(sc.steps) < 1:
        raise ConfigError("steps must be a non-empty list of positive integers")
    rng = _rng(cfg.seed, STREAM_SAMPLE)
    meta = {}
    if cfg.sample.oracle is not None:
        sched, field, mu0, sigma0 = _gaussian_oracle(cfg)
        x_T = rng.standard_normal(cfg.sample.draws)
        exact = gaussian_flow_map(x_T, sc.t_min, mu0, sigma0, sched)

        def metrics(x):
            return {"endpoint_mae": float(np.mean(np.abs(x - exact))), "sample_mean": float(np.mean(x)),
                    "sample_std": float(np.std(x))}

        def emit(x, tag):
            write_points(out / f"samples_{tag}.csv", x)
        meta["oracle"] = {"kind": "gaussian", "mu0": mu0, "sigma0": sigma0}
    else:
        path = _existing_checkpoint(checkpoint)
        manifest = read_manifest(path)
        model = load_checkpoint(path)
        extra = manifest.get("extra", {})
        sched = schedule_from_dict(extra.get("schedule", {"objective": sc.objective, "s": sc.s}))
        ds = extra.get("dataset", {"name": cfg.dataset.name, "params": cfg.dataset.params})
        data = _dataset(cfg, STREAM_HELDOUT, ds["name"], ds["params"])
        g = model.geometry
        if (g.C,) + g.latent_hw != data.latent_shape:
            raise ConfigError(f"checkpoint geometry does not fit dataset {data.name}")
        field = model_field(model)
        x_T = rng.standard_normal((cfg.sample.draws,) + data.latent_shape)
        held_out = data.sample(cfg.sample.eval_draws)

        def metrics(x):
            return {"energy_distance": energy_distance(data.from_latent(x), held_out)}

        def emit(x, tag):
            imgs = data.from_latent(x)
            if data.is_image:
                for k, img in enumerate(imgs[:cfg.sample.max_images]):
                    write_pgm(out / "images" / tag / f"{k:04d}.pgm", img[0])
            else:
                write_points(out / f"samples_{tag}.csv", imgs)
        meta["checkpoint"] = {"path": str(path), "config_hash": manifest["config_hash"],
                              "run_config_hash": extra.get("run_config_hash")}
    write_run_config(cfg, out)
    rows = []
    for M in sc.steps:
        grid = timestep_grid(int(M), sc.t_min)
        for name in sc.samplers:
            t0 = time.perf_counter()
            x = run_sampler(name, field, x_T, grid, sched)
            wall = (time.perf_counter() - t0) * 1e3
            emit(x, f"{name}_{int(M)}")
            for metric_name, value in metrics(x).items():
                rows.append({"sampler": name, "steps": int(M), "shift": float(getattr(sched, "s", 1.0)),
                             "metric_name": metric_name, "metric_value": value, "wall_ms": wall})
    write_csv(out / "sample_report.csv", rows, SCHEMAS["sample_report.csv"])
    write_json(out / "sample_meta.json", {**meta, "schedule": sched.to_dict(), "draws": cfg.sample.draws})
    return {"rows": rows}


# -- quantize ----------------------------------------------------------------


def quant_probes(model: LinearDiTModel, data: ToyDataset, n: int, rng: np.random.Generator, sched: Schedule):
    x0 = data.latents(n)
    t = rng.uniform(0.0, 1.0, n)
    x_t = forward_marginal(x0, rng.standard_normal(x0.shape), t, sched).astype(model.dtype)
    ctx = np.zeros((n, 1, model.cfg.cond_dim), dtype=model.dtype)
    return x_t, t, ctx


def cmd_quantize(cfg: RunConfig, checkpoint=None) -> dict:
    out = Path(cfg.out)
    path = _existing_checkpoint(checkpoint)
    manifest = read_manifest(path)
    model = load_checkpoint(path)
    policy = QuantPolicy(frozenset(cfg.quant.exempt))
    extra = manifest.get("extra", {})
    sched = schedule_from_dict(extra.get("schedule", cfg.schedule.build().to_dict()))
    ds = extra.get("dataset", {"name": cfg.dataset.name, "params": cfg.dataset.params})
    data = _dataset(cfg, STREAM_PROBES, ds["name"], ds["params"])
    write_run_config(cfg, out)
    qmodel = quantize_model(model, policy)
    probes = quant_probes(model, data, cfg.quant.probes, _rng(cfg.seed, STREAM_NOISE), sched)
    rows = fidelity_report(model, qmodel, probes)
    write_csv(out / "fidelity.csv", rows, SCHEMAS["fidelity.csv"])
    source = {"path": str(path), "config_hash": manifest["config_hash"],
              "run_config_hash": extra.get("run_config_hash")}
    save_quantized(qmodel, out / "qcheckpoint", policy, {**extra, "source": source})
    write_json(out / "fidelity_meta.json", {"source_checkpoint": source, "policy": policy.to_dict(),
                                            "probes": cfg.quant.probes,
                                            "quantized_layers": quantized_layers(qmodel)})
    return {"rows": rows, "qmodel": qmodel}


# -- caption-demo ------------------------------------------------------------


def cmd_caption_demo(cfg: RunConfig, captions=None) -> dict:
    out = Path(cfg.out)
    cc = cfg.captions
    path = captions or cc.path
    if path is None:
        raise ConfigError("caption-demo needs --captions or captions.path")
    if cc.draws < 0:
        raise ConfigError("draws must be non-negative")
    tau = cc.temperature
    if tau < 0:
        raise ConfigError(f"temperature must be >= 0, got {tau}")
    records = load_captions(path)
    write_run_config(cfg, out)
    rows = []
    for i, rec in enumerate(records):
        sampler = SamplerConfig.argmax(cfg.seed) if tau == 0 else SamplerConfig(tau, cfg.seed)
        if tau == 0:
            probs = np.zeros(len(rec.captions))
            probs[argmax_index(rec)] = 1.0
        else:
            probs = caption_probs(rec, tau)
        if cc.draws:
            idx = sample_indices(rec, sampler, cc.draws, _rng(cfg.seed, 1000 + i))
            freq = np.bincount(idx, minlength=len(probs)) / cc.draws
            gap = float(np.max(np.abs(freq - probs)))
        else:
            freq, gap = [None] * len(probs), None
        for j, cap in enumerate(rec.captions):
            rows.append({"image_id": rec.image_id, "caption_index": j, "clip_score": cap.clip_score,
                         "probability": float(probs[j]), "frequency": None if freq[j] is None else float(freq[j]),
                         "max_abs_diff": gap})
    write_csv(out / "freq_report.csv", rows, SCHEMAS["freq_report.csv"])
    return {"rows": rows}


COMMANDS = {"bench-attn": cmd_bench_attn, "train": cmd_train, "sample": cmd_sample,
            "quantize": cmd_quantize, "caption-demo": cmd_caption_demo}


def run(cfg: RunConfig, checkpoint=None, captions=None) -> dict:
    """Execute ``cfg.task`` single-threaded."""
    kw = {}
    if cfg.task in ("sample", "quantize"):
        kw["checkpoint"] = checkpoint
    elif cfg.task == "caption-demo":
        kw["captions"] = captions
    with threadpool_limits(limits=1):
        return COMMANDS[cfg.task](cfg, **kw)


def load_run_config(out_dir) -> dict:
    return json.loads((Path(out_dir) / "run_config.json").read_text())
