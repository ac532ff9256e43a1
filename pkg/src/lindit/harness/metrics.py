"""Sample-set distances."""

from __future__ import annotations

import numpy as np

from lindit.errors import DimensionError


def _pair_sum(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> float:
    total = 0.0
    for i in range(0, len(a), chunk):
        d = a[i:i + chunk, None, :] - b[None, :, :]
        total += float(np.sqrt(np.sum(d * d, axis=-1)).sum())
    return total


def energy_distance(x, y) -> float:
    """Unbiased estimate of ``2 E|X-Y| - E|X-X'| - E|Y-Y'|``.

    Within-set terms are U-statistics (the zero diagonal is excluded from the
    average), so the estimate is unbiased and can dip slightly below zero
    when both sets come from the same law. Rows are flattened, so images
    work as well as points.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    y = np.asarray(y, dtype=np.float64).reshape(len(y), -1)
    if x.shape[1] != y.shape[1]:
        raise DimensionError(f"sample dimensions differ: {x.shape[1]} vs {y.shape[1]}")
    n, m = len(x), len(y)
    if n < 2 or m < 2:
        raise DimensionError("energy distance needs at least two samples per set")
    xy = _pair_sum(x, y) / (n * m)
    xx = _pair_sum(x, x) / (n * (n - 1))
    yy = _pair_sum(y, y) / (m * (m - 1))
    return 2 * xy - xx - yy
