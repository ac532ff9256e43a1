"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from lindit.errors import DomainError, EvaluationError, NumericError
from lindit.numerics.tensor import Tape, Tensor, kink_probe

KINK_RADIUS = 10.0  # coordinates within KINK_RADIUS * h of a ReLU kink are skipped


def _evaluate(f: Callable[[Tensor], Tensor], data: np.ndarray) -> tuple[float, list[np.ndarray]]:
    with kink_probe() as pre:
        try:
            y = f(Tensor(data))
        except NumericError as exc:
            raise EvaluationError(f"objective is not finite: {exc}") from exc
    value = y.item()
    if not np.isfinite(value):
        raise EvaluationError(f"objective returned {value}")
    return value, pre


def _near_kink(base, plus, minus, h) -> bool:
    for p0, p1, p2 in zip(base, plus, minus):
        s0, s1, s2 = np.sign(p0), np.sign(p1), np.sign(p2)
        if np.any(s0 != s1) or np.any(s0 != s2):
            return True
        moved = (p1 != p0) | (p2 != p0)
        if np.any(moved & (np.abs(p0) < KINK_RADIUS * h)):
            return True
    return False


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-6) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. Coordinates whose perturbation
    moves any ReLU pre-activation across (or within ``10*h`` of) zero are
    excluded. Returns 0.0 when every coordinate is excluded.
    """
    if x.elem_type != "f64":
        raise DomainError("grad_check requires an f64 input")
    if not 1e-6 <= h <= 1e-4:
        raise DomainError(f"finite-difference step {h} outside [1e-6, 1e-4]")

    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        with kink_probe() as base_pre:
            try:
                y = f(leaf)
            except NumericError as exc:
                raise EvaluationError(f"objective is not finite: {exc}") from exc
    if y.size != 1 or not np.isfinite(y.item()):
        raise EvaluationError(f"objective must be a finite scalar, got shape {y.shape}")
    tape.backward(y)
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    analytic = analytic.ravel()

    flat = x.data.astype(np.float64).ravel()
    worst = 0.0
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += h
        xm = flat.copy()
        xm[i] -= h
        fp, pre_p = _evaluate(f, xp.reshape(x.shape))
        fm, pre_m = _evaluate(f, xm.reshape(x.shape))
        if _near_kink(base_pre, pre_p, pre_m, h):
            continue
        numeric = (fp - fm) / (2 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
