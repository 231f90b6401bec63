"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured numbers (run with -s or -rA to see them).

Criterion 3 is implemented exactly as stated and is expected to FAIL on
i.i.d. Gaussian toy weights: with an identity gate the input- and
output-sparsity intermediate errors coincide, and the SiLU gate pushes
|gate| mass toward zero, which makes gate-output masking strictly cheaper
at every level when the up-projection weights carry no trained saliency
structure. The check encodes trained-network behavior that random toy
weights cannot express; see the test body for the measured numbers.
"""

import time

import numpy as np
import pytest

from actsparse import (
    ActivationHistogram,
    MaskMode,
    RngStream,
    StepPolicy,
    block_relative_error,
    calibrate_model,
    cost_estimate,
    gen_block,
    gen_model,
    greedy_optimize,
    intermediate_error_input_sparsity,
    intermediate_error_output_sparsity,
    load_trace,
    matmul_dense,
    mc_relative_error,
    mlp_input,
    model_block_inputs,
    realized_sparsity,
    relative_error_magnitude,
    relative_error_random,
    sample_gaussian,
    save_trace,
    select_config,
    select_step,
    sparse_gemv,
    sparsify,
    sparsify_batched,
    uniform_config,
    validate_trace,
)
from actsparse.kernel import bench_gemv
from actsparse.tensor import Layout, Matrix

from conftest import inverse_abs_gaussian_cdf

P_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
GREEDY_TARGETS = (0.25, 0.4, 0.5, 0.65)
GREEDY_ALPHA = 0.025  # finer than the 0.05 default: iid toy blocks need
# granular steps for the greedy staircase to dominate uniform at low P


def gaussian_batch(seed, shape):
    return np.random.default_rng(seed).standard_normal(shape, dtype=np.float32)


@pytest.fixture(scope="module")
def greedy_artifacts(tmp_path_factory):
    """4-block model, calibration, greedy traces (run once, shared by 4/5)."""
    model = gen_model(RngStream(2024), 4, 256, 4, 704)
    cal = gaussian_batch(55, (10, 128, 256))
    per_block_taps = calibrate_model(model, cal)
    cal_inputs = model_block_inputs(model, cal)
    traces = [
        greedy_optimize(block, taps, x, StepPolicy(GREEDY_ALPHA), block_id=f"block{b}")
        for b, (block, taps, x) in enumerate(zip(model.blocks, per_block_taps, cal_inputs))
    ]
    trace_dir = tmp_path_factory.mktemp("traces")
    paths = []
    for trace in traces:
        path = trace_dir / f"{trace.block_id}.tealg"
        save_trace(path, trace)
        paths.append(path)
    return model, per_block_taps, traces, paths


def test_criterion_1_theory_reproduction():
    start = time.perf_counter()
    rng = RngStream(101)
    lines = []
    for p in P_GRID:
        analytic_mag = relative_error_magnitude(p)
        analytic_rnd = relative_error_random(p)
        mean_m, se_m = mc_relative_error(1024, 1024, p, 100, MaskMode.MAGNITUDE, rng)
        mean_r, se_r = mc_relative_error(1024, 1024, p, 100, MaskMode.RANDOM, rng)
        lines.append(f"  p={p:.1f} mag={analytic_mag:.4f} mc={mean_m:.4f}+-{se_m:.4f} "
                     f"rnd={analytic_rnd:.4f} mc={mean_r:.4f}+-{se_r:.4f}")
        assert abs(mean_m - analytic_mag) <= 3 * se_m, f"magnitude MC off at p={p}"
        assert abs(mean_r - analytic_rnd) <= 3 * se_r, f"random MC off at p={p}"
        assert analytic_mag < analytic_rnd, f"dominance broken at p={p}"
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0, f"theory reproduction took {elapsed:.0f}s (limit 120s)"
    print("\n".join(lines))
    print(f"PASS criterion 1: theory matches MC within 3 SE on the grid "
          f"({elapsed:.1f}s < 120s)")


def test_criterion_2_calibration_fidelity():
    hist = ActivationHistogram.empty("accept", 4096, 8.0)
    hist.record(sample_gaussian(RngStream(202), 10**5, 1.0))
    fresh = sample_gaussian(RngStream(203), 10**5, 1.0)
    for p in (0.25, 0.5, 0.75):
        t = hist.threshold(p)
        exact = inverse_abs_gaussian_cdf(p)
        assert abs(t - exact) <= 0.01, f"threshold off at p={p}: {t} vs {exact}"
        realized = realized_sparsity(fresh, t)
        assert abs(realized - p) <= 0.01, f"realized off at p={p}: {realized}"
        print(f"  p={p:.2f} threshold={t:.4f} exact={exact:.4f} realized={realized:.4f}")
    print("PASS criterion 2: histogram thresholds and realized sparsity "
          "within +-0.01 of the exact Gaussian quantiles")


def test_criterion_3_input_vs_output_sparsity():
    block = gen_block(RngStream(2024), 256, 4, 704)
    h = mlp_input(block, gaussian_batch(301, (4, 128, 256)))
    results = []
    for p in P_GRID:
        err_in = intermediate_error_input_sparsity(block, h, p)
        err_out = intermediate_error_output_sparsity(block, h, p)
        results.append((p, err_in, err_out))
        print(f"  p={p:.1f} input={err_in:.4f} output={err_out:.4f} "
              f"{'ok' if err_in < err_out else 'VIOLATED'}")
    violations = [(p, a, b) for p, a, b in results if not a < b]
    assert not violations, (
        "input-sparsity error is not below output-sparsity error at "
        f"{len(violations)}/9 grid points on iid Gaussian toy weights "
        f"(first violation p={violations[0][0]}: input {violations[0][1]:.4f} "
        f">= output {violations[0][2]:.4f}); this criterion encodes "
        "trained-weight saliency structure that a random toy block does not have"
    )
    print("PASS criterion 3: input sparsity beats output sparsity at every level")


def test_criterion_4_greedy_dominance(greedy_artifacts):
    model, per_block_taps, traces, _ = greedy_artifacts
    held = gaussian_batch(99, (4, 128, 256))
    held_inputs = model_block_inputs(model, held)
    for b, (block, taps, trace, x) in enumerate(
            zip(model.blocks, per_block_taps, traces, held_inputs)):
        for target in GREEDY_TARGETS:
            step = select_step(trace, target)
            g_err = block_relative_error(block, x, select_config(trace, target, taps))
            u_err = block_relative_error(block, x, uniform_config(taps, step.block_sparsity))
            print(f"  block{b} target={target:.2f} P={step.block_sparsity:.4f} "
                  f"greedy={g_err:.4f} uniform={u_err:.4f}")
            assert g_err <= u_err, (
                f"block{b}: greedy {g_err:.4f} > uniform {u_err:.4f} "
                f"at P={step.block_sparsity:.4f}"
            )
    print(f"PASS criterion 4: greedy error <= uniform at equal P for "
          f"targets {GREEDY_TARGETS} on all 4 blocks (alpha={GREEDY_ALPHA})")


def test_criterion_5_trace_invariants(greedy_artifacts):
    model, _, _, paths = greedy_artifacts
    for block, path in zip(model.blocks, paths):
        trace = load_trace(path)  # independent loader, from the file
        validate_trace(trace, block.footprints())
        ps = [s.block_sparsity for s in trace.steps]
        assert all(b > a for a, b in zip(ps, ps[1:]))
    print(f"PASS criterion 5: all {len(paths)} emitted traces satisfy strict P "
          "monotonicity, per-matrix monotonicity, and the bookkeeping "
          "identity to 1e-9 after an independent reload")


def test_criterion_6_kernel_oracle_equivalence():
    def check(seed, n, m):
        g = np.random.default_rng(seed)
        x = g.standard_normal(m, dtype=np.float32)
        w = Matrix(n, m, Layout.COL_MAJOR, g.standard_normal(n * m, dtype=np.float32))
        t = float(g.uniform(0.0, 1.5))
        y, macs = sparse_gemv(x, t, w, count_macs=True)
        ref = matmul_dense(sparsify(x, t), w)
        denom = float(np.linalg.norm(ref))
        err = float(np.linalg.norm(y - ref)) / denom if denom else float(np.linalg.norm(y))
        assert err <= 1e-5, f"case {seed} ({n}x{m}): rel error {err}"
        pruned = int(np.count_nonzero(np.abs(x) <= t))
        assert macs == (m - pruned) * n, f"case {seed}: MAC counter mismatch"

    for seed in range(1000):
        check(seed, 256, 256)
    for seed in range(100):
        check(10_000 + seed, 1024, 4096)
    print("PASS criterion 6: 1000 cases at 256x256 and 100 at 1024x4096 match "
          "the dense-on-masked-input oracle within 1e-5; MAC counter exact")


def test_criterion_7_kernel_trend():
    grid = [0.0, 0.25, 0.5, 0.9]
    res = bench_gemv(4096, 14336, grid, reps=10, warmup=3, rng=RngStream(707))
    by_s = {pt.sparsity: pt for pt in res.points}
    for pt in res.points:
        assert pt.traffic.weight_bytes_sparse == \
            (1.0 - pt.realized_sparsity) * pt.traffic.weight_bytes_dense
        speedup = res.dense_median_ns / pt.median_ns
        print(f"  s={pt.sparsity:.2f} realized={pt.realized_sparsity:.4f} "
              f"median={pt.median_ns/1e6:.2f}ms min={pt.min_ns/1e6:.2f}ms "
              f"speedup={speedup:.2f}x bytes={pt.traffic.weight_bytes_sparse:.3e}")
    assert by_s[0.9].median_ns < by_s[0.0].median_ns, (
        f"s=0.9 median {by_s[0.9].median_ns} not below s=0 {by_s[0.0].median_ns}"
    )
    print(f"PASS criterion 7: at 4096x14336 the s=0.9 median "
          f"({by_s[0.9].median_ns/1e6:.2f}ms) is below s=0 "
          f"({by_s[0.0].median_ns/1e6:.2f}ms); byte accounting exact "
          "(speedup ratios reported above, not asserted)")


def test_criterion_8_batched_reduction():
    for seed in range(1000):
        g = np.random.default_rng(40_000 + seed)
        x = g.standard_normal(64, dtype=np.float32)
        t = float(g.uniform(0.0, 1.5))
        batched, _ = sparsify_batched(x[None, :], t)
        assert batched[0].tobytes() == sparsify(x, t).tobytes(), f"case {seed}"

    m = 4096
    err_table = []
    w = np.random.default_rng(41_000).standard_normal((256, m)).astype(np.float32)
    for batch_size in (2, 4, 8):
        hist = ActivationHistogram.empty(f"braw{batch_size}", 4096, 4.0)
        cal_rng = RngStream(42_000 + batch_size)
        for _ in range(64):
            xs = sample_gaussian(cal_rng, batch_size * m, 1.0).reshape(batch_size, m)
            hist.record(np.abs(xs).mean(axis=0))
        t = hist.threshold(0.5)
        fresh = sample_gaussian(RngStream(43_000 + batch_size),
                                batch_size * m, 1.0).reshape(batch_size, m)
        sparse, mask = sparsify_batched(fresh, t)
        col_sparsity = float(mask.mean())
        assert abs(col_sparsity - 0.5) <= 0.05, (
            f"B={batch_size}: column sparsity {col_sparsity}"
        )
        dense_y = fresh @ w.T
        sparse_y = sparse @ w.T
        rel = float(np.linalg.norm(dense_y - sparse_y) / np.linalg.norm(dense_y))
        err_table.append((batch_size, col_sparsity, rel))
    print("  B  col_sparsity  rel_error (reported, not asserted)")
    for batch_size, s, rel in err_table:
        print(f"  {batch_size}  {s:.4f}        {rel:.4f}")
    print("PASS criterion 8: B=1 reduction bit-exact over 1000 cases; calibrated "
          "column sparsity within +-0.05 of 0.5 for B in {2,4,8} at m=4096")


def test_criterion_9_cost_accounting():
    passes = cost_estimate(n_matrices=7, alpha=0.05, samples=10)
    assert passes == 9800
    print("PASS criterion 9: greedy cost estimate reproduces 9800 forward "
          "passes for (M=10, n=7, alpha=0.05)")
