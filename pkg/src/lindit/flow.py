"""Noise schedules, training objectives and closed-form Gaussian oracles.

Time runs over [0, 1]: t=0 is data, t=1 is pure noise. The forward
marginal is ``x_t = alpha(t) * x0 + sigma(t) * eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from lindit.errors import ConfigError, DimensionError, DivergenceError, DomainError, NumericError
from lindit.numerics import Tensor, mean_all, mul, sub

T_MIN = 1e-3
COSINE_OFFSET = 0.008
ALPHA_BAR_FLOOR = 1e-5


def _check_t(t, lo_open: bool = False):
    t = np.asarray(t, dtype=np.float64)
    bad = (t < 0) | (t > 1) | ~np.isfinite(t)
    if lo_open:
        bad |= t <= 0
    if np.any(bad):
        rng = "(0, 1]" if lo_open else "[0, 1]"
        raise DomainError(f"time must lie in {rng}, got {t}")
    return t


def shift_sigma(sigma, s: float):
    """``s*sigma / (1 + (s-1)*sigma)``; works on scalars and arrays."""
    if not s >= 1:
        raise ConfigError(f"shift factor must be >= 1, got {s}")
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any((sigma < 0) | (sigma > 1)):
        raise DomainError(f"sigma must lie in [0, 1], got {sigma}")
    out = s * sigma / (1.0 + (s - 1.0) * sigma)
    return float(out) if out.ndim == 0 else out


def unshift_sigma(sigma_shifted, s: float):
    """Inverse of :func:`shift_sigma`."""
    st = np.asarray(sigma_shifted, dtype=np.float64)
    out = st / (s - (s - 1.0) * st)
    return float(out) if out.ndim == 0 else out


class Schedule:
    """Interface shared by the flow and DDPM schedules."""

    objective = ""

    def alpha(self, t):
        raise NotImplementedError

    def sigma(self, t):
        raise NotImplementedError

    def lam(self, t):
        """Log signal-to-noise ``ln(alpha/sigma)``; -inf at t=1 for the flow schedule, +inf at t=0."""
        a, s = np.asarray(self.alpha(t)), np.asarray(self.sigma(t))
        with np.errstate(divide="ignore"):
            out = np.log(a) - np.log(s)
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class FlowSchedule(Schedule):
    s: float = 1.0
    objective = "fm"

    def __post_init__(self):
        if not self.s >= 1:
            raise ConfigError(f"shift factor must be >= 1, got {self.s}")

    def sigma(self, t):
        return shift_sigma(_check_t(t), self.s)

    def alpha(self, t):
        sig = self.sigma(t)
        return 1.0 - sig

    def time_of_sigma(self, sigma_shifted):
        return unshift_sigma(sigma_shifted, self.s)

    def to_dict(self) -> dict:
        return {"objective": "fm", "s": self.s}


@dataclass(frozen=True)
class DDPMSchedule(Schedule):
    """Cosine alpha-bar schedule on continuous t in [0, 1]."""

    offset: float = COSINE_OFFSET
    floor: float = ALPHA_BAR_FLOOR
    objective = "ddpm"

    def alpha_bar(self, t):
        t = _check_t(t)
        f = lambda u: np.cos((u + self.offset) / (1 + self.offset) * math.pi / 2) ** 2  # noqa: E731
        ab = np.clip(f(t) / f(0.0), self.floor, 1.0)
        return float(ab) if ab.ndim == 0 else ab

    def alpha(self, t):
        return np.sqrt(self.alpha_bar(t))

    def sigma(self, t):
        return np.sqrt(1.0 - self.alpha_bar(t))

    def to_dict(self) -> dict:
        return {"objective": "ddpm", "offset": self.offset, "floor": self.floor}


def _per_sample(coef, like: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return coef
    if coef.shape[0] != like.shape[0]:
        raise DimensionError(f"{coef.shape[0]} times for a batch of {like.shape[0]}")
    return coef.reshape(coef.shape + (1,) * (like.ndim - 1))


def forward_marginal(x0, eps, t, sched: Schedule) -> np.ndarray:
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and noise {eps.shape} differ in shape")
    a = _per_sample(sched.alpha(t), x0)
    s = _per_sample(sched.sigma(t), x0)
    return (a * x0 + s * eps).astype(x0.dtype, copy=False)


def velocity_target(x0, eps) -> np.ndarray:
    x0, eps = np.asarray(x0), np.asarray(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"x0 {x0.shape} and noise {eps.shape} differ in shape")
    return eps - x0


@dataclass
class TrainBatch:
    x0: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    ctx: np.ndarray | None = None


def sample_batch(rng: np.random.Generator, x0: np.ndarray, ctx=None) -> TrainBatch:
    """Pair data with fresh standard-normal noise and uniform times."""
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    t = rng.uniform(0.0, 1.0, x0.shape[0])
    return TrainBatch(x0, eps, t, ctx)


ModelFn = Callable[[Tensor, np.ndarray, object], Tensor]


def _mse(model: ModelFn, x_t: np.ndarray, t, ctx, target: np.ndarray, step) -> Tensor:
    try:
        out = model(Tensor(x_t), t, ctx)
        if out.shape != target.shape:
            raise DimensionError(f"model output {out.shape} does not match latent {target.shape}")
        diff = sub(out, Tensor(target.astype(out.dtype, copy=False)))
        loss = mean_all(mul(diff, diff))
    except NumericError as exc:
        raise DivergenceError(f"non-finite training loss: {exc}", step=step) from exc
    return loss


def fm_loss(model: ModelFn, batch: TrainBatch, sched: FlowSchedule, step: int | None = None) -> Tensor:
    x_t = forward_marginal(batch.x0, batch.eps, batch.t, sched)
    return _mse(model, x_t, batch.t, batch.ctx, velocity_target(batch.x0, batch.eps), step)


def ddpm_loss(model: ModelFn, batch: TrainBatch, sched: DDPMSchedule, step: int | None = None) -> Tensor:
    x_t = forward_marginal(batch.x0, batch.eps, batch.t, sched)
    return _mse(model, x_t, batch.t, batch.ctx, np.asarray(batch.eps), step)


def objective_loss(model: ModelFn, batch: TrainBatch, sched: Schedule, step: int | None = None) -> Tensor:
    if sched.objective == "fm":
        return fm_loss(model, batch, sched, step)
    if sched.objective == "ddpm":
        return ddpm_loss(model, batch, sched, step)
    raise ConfigError(f"unknown objective {sched.objective!r}")


def _gaussian_moments(x, t, mu0, sigma0, sched):
    t = _check_t(t, lo_open=True)
    a, s = np.asarray(sched.alpha(t)), np.asarray(sched.sigma(t))
    var = a * a * sigma0 * sigma0 + s * s
    centered = np.asarray(x, dtype=np.float64) - a * mu0
    return a, s, var, centered


def gaussian_oracle_data_prediction(x, t, mu0: float, sigma0: float, sched: Schedule):
    """E[x0 | x_t = x] for data ~ N(mu0, sigma0^2)."""
    a, _, var, c = _gaussian_moments(x, t, mu0, sigma0, sched)
    return mu0 + a * sigma0 * sigma0 / var * c


def gaussian_oracle_noise(x, t, mu0: float, sigma0: float, sched: Schedule):
    """E[eps | x_t = x] for data ~ N(mu0, sigma0^2)."""
    _, s, var, c = _gaussian_moments(x, t, mu0, sigma0, sched)
    return s / var * c


def gaussian_oracle_velocity(x, t, mu0: float, sigma0: float, sched: Schedule):
    """E[eps - x0 | x_t = x]; t=0 is rejected because the noise posterior degenerates."""
    return gaussian_oracle_noise(x, t, mu0, sigma0, sched) - gaussian_oracle_data_prediction(x, t, mu0, sigma0, sched)


def gaussian_flow_map(x_T, t, mu0: float, sigma0: float, sched: Schedule):
    """Exact probability-flow solution at time t started from ``x_T`` at t=1 (sigma(1)=1, alpha(1)=0)."""
    a, s = np.asarray(sched.alpha(_check_t(t))), np.asarray(sched.sigma(t))
    return a * mu0 + np.sqrt(a * a * sigma0 * sigma0 + s * s) * np.asarray(x_T, dtype=np.float64)


def timestep_grid(M: int, t_min: float = T_MIN) -> np.ndarray:
    """``M + 1`` uniformly spaced times from 1 down to ``t_min``."""
    if M < 1:
        raise ConfigError(f"need at least one sampling step, got {M}")
    if not 0 <= t_min < 1:
        raise ConfigError(f"t_min must lie in [0, 1), got {t_min}")
    return np.linspace(1.0, t_min, M + 1)
