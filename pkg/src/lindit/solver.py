"""Flow-Euler and the second-order multistep flow DPM solver.

Velocity fields are plain callables ``v(x: ndarray, t: float) -> ndarray``;
data predictors have the same signature and return an estimate of x0.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from lindit.errors import ConfigError, DivergenceError, ScheduleError
from lindit.flow import T_MIN, FlowSchedule, Schedule, timestep_grid

Field = Callable[[np.ndarray, float], np.ndarray]
REPORT_COLUMNS = ("sampler", "steps", "shift", "metric_name", "metric_value", "wall_ms")
SAMPLERS = ("euler", "dpm")
RK4_STEPS = 1000


def model_output_to_data(x_t, t, v, sched: Schedule):
    return np.asarray(x_t) - sched.sigma(t) * np.asarray(v)


def data_predictor(v_field: Field, sched: Schedule) -> Field:
    """Turn a velocity field into the data prediction ``x - sigma(t) v``."""
    return lambda x, t: model_output_to_data(x, t, v_field(x, t), sched)


def noise_to_data(eps_field: Field, sched: Schedule) -> Field:
    """Data prediction ``(x - sigma eps) / alpha`` for a noise-predicting model."""

    def pred(x, t):
        a = sched.alpha(t)
        if a <= 0:
            raise ScheduleError(f"alpha({t}) = 0; noise prediction cannot be inverted")
        return (np.asarray(x) - sched.sigma(t) * np.asarray(eps_field(x, t))) / a

    return pred


def _validate_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2:
        raise ScheduleError(f"grid needs at least two times, got shape {grid.shape}")
    if np.any(np.diff(grid) >= 0):
        raise ScheduleError("sampling grid must be strictly decreasing")
    if grid[0] > 1 or grid[-1] < 0:
        raise ScheduleError(f"grid must lie within [0, 1], got [{grid[-1]}, {grid[0]}]")
    return grid


def _finite(x: np.ndarray, step: int, who: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise DivergenceError(f"{who}: non-finite state", step=step)
    return x


def flow_euler_sample(v_field: Field, x_T, grid, sched: FlowSchedule) -> np.ndarray:
    """Explicit Euler on ``dx/dsigma = v`` along the shifted grid."""
    grid = _validate_grid(grid)
    sig = np.asarray(sched.sigma(grid))
    x = np.array(x_T, dtype=np.float64)
    for i in range(len(grid) - 1):
        v = np.asarray(v_field(x, float(grid[i])))
        x = _finite(x + (sig[i + 1] - sig[i]) * v, i + 1, "flow_euler_sample")
    return x


@dataclass
class SolverState:
    x: np.ndarray
    grid: np.ndarray
    sigma: np.ndarray
    alpha: np.ndarray
    lam: np.ndarray
    h: np.ndarray  # h[i] = lam[i] - lam[i-1]; h[0] unused (nan)
    i: int = 0
    buffer: deque = field(default_factory=lambda: deque(maxlen=2))
    evals: int = 0
    buffer_writes: list = field(default_factory=list)  # step index at which each prediction was stored
    readout: bool = False


def _init_state(x_T, grid, sched: Schedule) -> SolverState:
    sig = np.asarray(sched.sigma(grid), dtype=np.float64)
    alp = np.asarray(sched.alpha(grid), dtype=np.float64)
    lam = np.asarray(sched.lam(grid), dtype=np.float64)
    h = np.full_like(lam, np.nan)
    h[1:] = lam[1:] - lam[:-1]
    if np.any(sig[:-1] <= 0):
        i = int(np.argmax(sig[:-1] <= 0))
        raise ScheduleError(f"sigma vanishes at t={grid[i]} before the final step")
    return SolverState(np.array(x_T, dtype=np.float64), grid, sig, alp, lam, h)


def _exp_coef(st: SolverState, i: int) -> tuple[float, float]:
    """``sigma_i/sigma_{i-1}`` and ``alpha_i (exp(-h_i) - 1)`` without forming exp(-h)."""
    ratio = st.sigma[i] / st.sigma[i - 1]
    return ratio, st.alpha[i - 1] * ratio - st.alpha[i]


def dpm_solver_2m(data_pred: Field, x_T, grid, sched: Schedule, order: int = 2,
                  final_readout: bool = False, return_state: bool = False):
    """Multistep exponential integrator on the data prediction.

    Step 1 is first order; later steps extrapolate with
    ``D = (1 + 1/(2r)) x0_{i-1} - 1/(2r) x0_{i-2}``, ``r = h_{i-1}/h_i``. The
    newest prediction is not evaluated after the last step. When the grid
    ends at sigma=0 the last step falls back to first order (its h is
    infinite). ``final_readout`` appends one data-prediction evaluation at
    the last grid time and returns it.
    """
    if order not in (1, 2):
        raise ConfigError(f"solver order must be 1 or 2, got {order}")
    grid = _validate_grid(grid)
    st = _init_state(x_T, grid, sched)
    M = len(grid) - 1

    def evaluate(i):
        st.evals += 1
        out = np.asarray(data_pred(st.x, float(grid[i])), dtype=np.float64)
        st.buffer.append(out)
        st.buffer_writes.append(i)
        return _finite(out, i, "dpm_solver data prediction")

    evaluate(0)
    for i in range(1, M + 1):
        st.i = i
        ratio, coef = _exp_coef(st, i)
        first = order == 1 or i == 1 or st.sigma[i] == 0
        if first:
            D = st.buffer[-1]
        else:
            half_inv_r = st.h[i] / (2.0 * st.h[i - 1])  # 1/(2r); zero when h_{i-1} is infinite
            D = (1.0 + half_inv_r) * st.buffer[-1] - half_inv_r * st.buffer[-2]
        st.x = _finite(ratio * st.x - coef * D, i, "dpm_solver")
        if i < M:
            evaluate(i)
    out = st.x
    if final_readout:
        st.readout = True
        st.evals += 1
        out = _finite(np.asarray(data_pred(st.x, float(grid[M])), dtype=np.float64), M, "dpm_solver readout")
    return (out, st) if return_state else out


def flow_dpm_solver_sample(v_field: Field, x_T, grid, sched: FlowSchedule, final_readout: bool = False,
                           return_state: bool = False):
    return dpm_solver_2m(data_predictor(v_field, sched), x_T, grid, sched, 2, final_readout, return_state)


def rk4_reference(v_field: Field, x_T, t_end: float, sched: FlowSchedule, steps: int = RK4_STEPS,
                  t_start: float = 1.0) -> np.ndarray:
    """Classical RK4 on ``dx/dsigma = v`` with ``steps`` uniform sigma steps."""
    s0, s1 = float(sched.sigma(t_start)), float(sched.sigma(t_end))
    hs = (s1 - s0) / steps
    x = np.array(x_T, dtype=np.float64)
    tt = sched.time_of_sigma

    def v(x, s):
        return np.asarray(v_field(x, float(np.clip(tt(s), 0.0, 1.0))))

    for k in range(steps):
        s = s0 + k * hs
        k1 = v(x, s)
        k2 = v(x + 0.5 * hs * k1, s + 0.5 * hs)
        k3 = v(x + 0.5 * hs * k2, s + 0.5 * hs)
        k4 = v(x + hs * k3, s + hs)
        x = _finite(x + hs / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4), k + 1, "rk4_reference")
    return x


def run_sampler(name: str, field: Field, x_T, grid, sched: Schedule) -> np.ndarray:
    """Dispatch on sampler name and on the schedule's objective.

    Flow schedules expect a velocity field. DDPM schedules expect a noise
    predictor; its data prediction runs through the same multistep update,
    first order for "euler" (the DDIM step) and second order for "dpm".
    """
    if name not in SAMPLERS:
        raise ConfigError(f"unknown sampler {name!r}; choose from {SAMPLERS}")
    if sched.objective == "ddpm":
        return dpm_solver_2m(noise_to_data(field, sched), x_T, grid, sched, 1 if name == "euler" else 2)
    if name == "euler":
        return flow_euler_sample(field, x_T, grid, sched)
    return flow_dpm_solver_sample(field, x_T, grid, sched)


def endpoint_error(reference: np.ndarray) -> Callable[[np.ndarray, int], float]:
    """Mean absolute deviation from a reference endpoint (same noise set)."""
    ref = np.asarray(reference)
    return lambda x, M: float(np.mean(np.abs(np.asarray(x) - ref)))


def sampler_report(v_field: Field, sched: Schedule, step_list, metric, x_T, metric_name: str = "endpoint_mae",
                   samplers=SAMPLERS, t_min: float | None = None, clock=time.perf_counter) -> list[dict]:
    """One row per (M, sampler). ``metric(x0, M) -> float``; the grid ends at ``t_min``."""
    steps = list(step_list)
    if not steps:
        raise ConfigError("step_list must not be empty")
    rows = []
    for M in steps:
        grid = timestep_grid(int(M), T_MIN if t_min is None else t_min)
        for name in samplers:
            t0 = clock()
            try:
                x = run_sampler(name, v_field, x_T, grid, sched)
            except DivergenceError as exc:
                raise DivergenceError(f"{name} with M={M}: {exc}") from exc
            wall = (clock() - t0) * 1e3
            rows.append({"sampler": name, "steps": int(M), "shift": float(getattr(sched, "s", 1.0)), "metric_name": metric_name,
                         "metric_value": float(metric(x, int(M))), "wall_ms": wall})
    return rows


def loglog_slope(steps, errors) -> float:
    """Least-squares slope of log(error) against log(steps)."""
    return float(np.polyfit(np.log(np.asarray(steps, dtype=np.float64)), np.log(np.asarray(errors)), 1)[0])
