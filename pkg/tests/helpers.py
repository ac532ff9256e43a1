import numpy as np

from lindit.blocks import LatentGeometry, LinearDiTConfig, LinearDiTModel, build_model
from lindit.numerics import Tensor, mul, sum_all


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-300))


def randomize(model: LinearDiTModel, seed: int, std: float = 0.3) -> LinearDiTModel:
    """Copy of ``model`` with every parameter redrawn, so zero-initialised gates do not mask anything."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, p in model.params.items():
        if name == "y_scale":
            data = np.asarray(1.0 + 0.1 * rng.standard_normal(), dtype=p.dtype)
        else:
            data = (std * rng.standard_normal(p.shape)).astype(p.dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return LinearDiTModel(model.cfg, model.geometry, params)


def with_kernels(model: LinearDiTModel, center_only: bool) -> LinearDiTModel:
    params = dict(model.params)
    for name, p in model.params.items():
        if name.endswith("conv.weight") and center_only:
            k = np.zeros(p.shape, dtype=p.dtype)
            k[:, 1, 1] = 1.0
            params[name] = Tensor(k, requires_grad=True, name=name)
    return LinearDiTModel(model.cfg, model.geometry, params)


def tiny_model(width=8, depth=2, ffn=12, heads=2, cond=6, freq=8, geometry=None, seed=0):
    cfg = LinearDiTConfig(width=width, depth=depth, ffn_dim=ffn, heads=heads, cond_dim=cond,
                          freq_dim=freq, elem_type="f64")
    g = geometry or LatentGeometry(4, 4, C=2, P=1)
    return randomize(build_model(cfg, g, seed), seed + 1)


def param_objective(model: LinearDiTModel, name: str, x, t, ctx, weights=None):
    """Scalar loss as a function of one named parameter, for gradient checks."""

    def f(p: Tensor) -> Tensor:
        params = dict(model.params)
        params[name] = p
        out = LinearDiTModel(model.cfg, model.geometry, params)(x, t, ctx)
        return sum_all(out if weights is None else mul(out, weights))

    return f


# Shared toy recipe for the trend checks: identical model, data, budget and seeds
# across objectives; only the objective differs.
TOY_ITERS = 2000
TOY_SAMPLE_STEPS = 50


def toy_config(objective: str, seed: int, out, task: str = "train", steps=(TOY_SAMPLE_STEPS,), **sample):
    from lindit.harness.config import RunConfig

    return RunConfig.from_dict({
        "task": task, "seed": seed, "out": str(out),
        "dataset": {"name": "eight_gaussians2d"},
        "schedule": {"objective": objective, "steps": list(steps), "samplers": ["dpm"]},
        "optimizer": {"iters": TOY_ITERS, "batch": 256, "checkpoint_every": 0},
        "sample": {"draws": 2048, "eval_draws": 2048, **sample},
    })
