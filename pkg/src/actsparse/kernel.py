"""Column-skipping sparse GEMV with fused threshold masking, a bytes-moved
traffic model, and a median-of-reps latency harness.

The kernel streams a column-major weight matrix column by column; the
threshold comparison on the matching input entry is fused into the column
loop (no separate mask pass), and a pruned entry skips its column entirely,
so both the arithmetic and the weight bytes touched scale with the kept
fraction. In the memory-dominated regime that is where the speedup lives.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .sparsifier import realized_sparsity, sparsify
from .tensor import Layout, Matrix, RngStream, as_vector, matmul_dense
from .theory import gaussian_threshold

MIN_REPS = 10
MIN_WARMUP = 3
_REL_TOL = 1e-5
_RESOLUTION_MULTIPLE = 50  # median must exceed this many timer ticks


@njit(cache=True)
def _skip_gemv(x, data, rows, cols, t):
    # Per output j, contributions still accumulate in ascending column
    # order; skipping only removes terms, it never reorders them.
    y = np.zeros(rows, dtype=np.float32)
    used = 0
    for i in range(cols):
        xi = x[i]
        if abs(xi) <= t:
            continue
        used += 1
        base = i * rows
        for j in range(rows):
            y[j] += xi * data[base + j]
    return y, used


def sparse_gemv(x, t: float, w: Matrix, count_macs: bool = False):
    """y = s_t(x) W^T over a column-major W, skipping pruned columns.

    With ``count_macs=True`` returns (y, macs) where macs is the number of
    multiply-accumulate operations actually executed.
    """
    if w.layout is not Layout.COL_MAJOR:
        raise ValueError("sparse_gemv requires a column-major weight matrix")
    if not t >= 0.0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    v = as_vector(x)
    if v.size != w.cols:
        raise ValueError(
            f"dimension mismatch: x has length {v.size}, W is {w.rows}x{w.cols}"
        )
    y, used = _skip_gemv(v, w.data, w.rows, w.cols, float(t))
    if count_macs:
        return y, used * w.rows
    return y


@dataclass(frozen=True)
class TrafficReport:
    """Bytes moved for one GEMV under the column-skip model."""

    weight_bytes_dense: int
    weight_bytes_sparse: float
    activation_bytes: int
    realized_sparsity: float


def traffic_model(
    n: int, m: int, realized: float, bytes_per_element: int = 4
) -> TrafficReport:
    if n < 1 or m < 1 or bytes_per_element < 1:
        raise ValueError("dimensions and element size must be positive")
    if not 0.0 <= realized <= 1.0:
        raise ValueError(f"realized sparsity must lie in [0, 1], got {realized}")
    dense = n * m * bytes_per_element
    return TrafficReport(
        weight_bytes_dense=dense,
        weight_bytes_sparse=(1.0 - realized) * dense,
        activation_bytes=m * bytes_per_element,
        realized_sparsity=realized,
    )


@dataclass(frozen=True)
class BenchPoint:
    sparsity: float
    realized_sparsity: float
    median_ns: float
    min_ns: float
    checksum: float
    checksum_ok: bool
    traffic: TrafficReport


@dataclass(frozen=True)
class BenchResult:
    rows: int
    cols: int
    reps: int
    warmup: int
    dense_median_ns: float
    dense_min_ns: float
    points: tuple[BenchPoint, ...]


def _rel_error(y: np.ndarray, ref: np.ndarray) -> float:
    denom = float(np.linalg.norm(ref))
    if denom == 0.0:
        return float(np.linalg.norm(y))
    return float(np.linalg.norm(y - ref)) / denom


def _check_resolution(median_ns: float) -> None:
    res_ns = time.get_clock_info("perf_counter").resolution * 1e9
    if median_ns < _RESOLUTION_MULTIPLE * res_ns:
        raise ValueError(
            f"timer resolution too coarse for this shape "
            f"(median {median_ns:.0f} ns vs {res_ns:.0f} ns ticks); raise reps "
            f"or benchmark a larger shape"
        )


def bench_gemv(
    rows: int,
    cols: int,
    sparsities,
    reps: int,
    warmup: int,
    rng: RngStream,
    bytes_per_element: int = 4,
) -> BenchResult:
    """Latency-vs-sparsity sweep on one seeded (x, W) pair.

    For each target s the threshold is the exact Gaussian quantile, so the
    realized sparsity of the N(0,1) input lands near s. Every rep's output
    is checked against the dense-on-masked-input oracle after the clock
    stops. Runs single-threaded on the calling worker; keep the machine
    quiet for meaningful medians.
    """
    if reps < MIN_REPS:
        raise ValueError(f"need reps >= {MIN_REPS}, got {reps}")
    if warmup < MIN_WARMUP:
        raise ValueError(f"need warmup >= {MIN_WARMUP}, got {warmup}")
    grid = [float(s) for s in sparsities]
    if any(not 0.0 <= s <= 1.0 for s in grid):
        raise ValueError("sparsities must lie in [0, 1]")

    g = rng.next_generator()
    w = Matrix(rows, cols, Layout.COL_MAJOR,
               g.standard_normal(rows * cols, dtype=np.float32))
    x = g.standard_normal(cols, dtype=np.float32)

    def time_reps(fn):
        for _ in range(warmup):
            fn()
        samples = []
        outputs = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            y = fn()
            t1 = time.perf_counter_ns()
            samples.append(t1 - t0)
            outputs.append(y)
        return samples, outputs

    dense_samples, _ = time_reps(lambda: matmul_dense(x, w))
    dense_median = statistics.median(dense_samples)
    _check_resolution(dense_median)

    points = []
    for s in grid:
        t = gaussian_threshold(s)
        y_ref = matmul_dense(sparsify(x, t), w)
        realized = realized_sparsity(x, t)
        samples, outputs = time_reps(lambda: sparse_gemv(x, t, w))
        ok = all(_rel_error(y, y_ref) <= _REL_TOL for y in outputs)
        median = statistics.median(samples)
        _check_resolution(median)
        points.append(BenchPoint(
            sparsity=s,
            realized_sparsity=realized,
            median_ns=float(median),
            min_ns=float(min(samples)),
            checksum=float(np.sum(outputs[-1], dtype=np.float64)),
            checksum_ok=ok,
            traffic=traffic_model(rows, cols, realized, bytes_per_element),
        ))
        if not ok:
            raise ValueError(f"kernel output diverged from the oracle at s={s}")

    return BenchResult(
        rows=rows,
        cols=cols,
        reps=reps,
        warmup=warmup,
        dense_median_ns=float(dense_median),
        dense_min_ns=float(min(dense_samples)),
        points=tuple(points),
    )
