"""Attention benchmark: wall time and scratch allocation per variant and token count."""

from __future__ import annotations

import gc
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from lindit.errors import ConfigError, DivergenceError
from lindit.linattn import (
    AttentionInputs,
    MultiHeadParams,
    fused_multihead_linear_attention,
    linear_attention_naive,
    linear_attention_streaming,
    softmax_attention,
)

VARIANTS = ("naive", "streaming", "fused", "softmax")
BENCH_COLUMNS = ("variant", "N", "d", "median_ms", "allocs_bytes")
CROSSCHECK_TOL = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-10}


def aux_bytes(fn, *args, **kwargs) -> int:
    """Peak bytes allocated by ``fn`` beyond its returned array."""
    gc.collect()
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base = tracemalloc.get_traced_memory()[0]
        out = fn(*args, **kwargs)
        peak = tracemalloc.get_traced_memory()[1]
    finally:
        if not was_tracing:
            tracemalloc.stop()
    return max(0, peak - base - np.asarray(out).nbytes)


def median_ms(fn, *args, reps: int = 5, **kwargs) -> float:
    fn(*args, **kwargs)  # warm-up
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn(*args, **kwargs)
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


@dataclass
class BenchCase:
    inputs: AttentionInputs
    x: np.ndarray
    params: MultiHeadParams


def make_case(rng: np.random.Generator, N: int, d: int, heads: int, dtype) -> BenchCase:
    Q, K, V, x = (rng.standard_normal((N, d)).astype(dtype) for _ in range(4))
    params = MultiHeadParams(
        (rng.standard_normal((d, 3 * d)) / math.sqrt(d)).astype(dtype),
        (rng.standard_normal((d, d)) / math.sqrt(d)).astype(dtype),
        heads,
    )
    return BenchCase(AttentionInputs(Q, K, V), x, params)


def _runner(variant: str, case: BenchCase):
    if variant == "naive":
        return linear_attention_naive, (case.inputs,)
    if variant == "streaming":
        return linear_attention_streaming, (case.inputs,)
    if variant == "fused":
        return fused_multihead_linear_attention, (case.x, case.params)
    if variant == "softmax":
        return softmax_attention, (case.inputs,)
    raise ConfigError(f"unknown attention variant {variant!r}; choose from {VARIANTS}")


def crosscheck(case: BenchCase, naive_out: np.ndarray | None = None) -> float:
    """Relative max-abs gap between streaming and naive outputs; raises if too large."""
    ref = linear_attention_naive(case.inputs) if naive_out is None else naive_out
    out = linear_attention_streaming(case.inputs)
    gap = float(np.max(np.abs(out - ref)) / max(float(np.max(np.abs(ref))), 1e-30))
    if gap > CROSSCHECK_TOL[out.dtype]:
        raise DivergenceError(f"streaming/naive mismatch {gap:.3e} at N={case.inputs.N}")
    return gap


def bench_attention(
    Ns, d: int = 64, variants=("streaming", "softmax"), reps: int = 5, heads: int = 1,
    elem_type: str = "f32", seed: int = 0, check_max_n: int = 1024,
):
    """One row per (variant, N), single-threaded. Returns ``(rows, checks)``.

    ``checks`` lists the streaming-vs-naive gaps computed along the way.
    """
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown attention variant {v!r}; choose from {VARIANTS}")
    if reps < 5:
        raise ConfigError("benchmarks report medians of at least 5 repetitions")
    dtype = np.float32 if elem_type == "f32" else np.float64
    rng = np.random.default_rng(seed)
    rows, checks = [], []
    with threadpool_limits(limits=1):
        for N in Ns:
            case = make_case(rng, int(N), d, heads, dtype)
            naive_out = None
            for variant in variants:
                fn, args = _runner(variant, case)
                ms = median_ms(fn, *args, reps=reps)
                allocs = aux_bytes(fn, *args)
                if variant == "naive":
                    naive_out = fn(*args)
                rows.append({"variant": variant, "N": int(N), "d": d, "median_ms": ms, "allocs_bytes": allocs})
            if naive_out is not None or N <= check_max_n:
                checks.append({"N": int(N), "streaming_vs_naive": crosscheck(case, naive_out)})
    return rows, checks


def time_ratio(rows, variant: str, n_hi: int, n_lo: int) -> float:
    t = {r["N"]: r["median_ms"] for r in rows if r["variant"] == variant}
    return t[n_hi] / t[n_lo]
