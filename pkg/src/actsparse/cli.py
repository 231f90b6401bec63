"""Command-line entry point: model generation, calibration, greedy sparsity
search, evaluation sweeps, error-law tables, and kernel benchmarks.

Every subcommand is deterministic given its seed and inputs (timing fields
excepted) and emits plot-ready delimiter-separated tables. File outputs get
a JSON run manifest written alongside.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .greedy import (
    StepPolicy,
    block_relative_error,
    greedy_optimize,
    load_configs,
    save_configs,
    save_trace,
    select_config,
    uniform_config,
)
from .kernel import bench_gemv
from .model import (
    DEFAULT_BLOCKS,
    DEFAULT_D_FF,
    DEFAULT_D_MODEL,
    DEFAULT_HEADS,
    DEFAULT_SEQ,
    HiddenStateTap,
    TapPosition,
    calibrate_model,
    gen_model,
    intermediate_error_input_sparsity,
    intermediate_error_output_sparsity,
    load_model,
    mlp_input,
    model_block_inputs,
    model_forward_dense,
    model_forward_sparse,
    save_model,
)
from .sparsifier import DEFAULT_BIN_COUNT, load_histogram, save_histogram
from .tensor import RngStream
from .theory import MaskMode, mc_relative_error, relative_error_magnitude, relative_error_random

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3


def _write_manifest(target: Path, command: str, seed: int, params: dict,
                    inputs: list[str], outputs: list[str]) -> None:
    manifest = {
        "tool": "actsparse",
        "version": __version__,
        "subcommand": command,
        "seed": seed,
        "parameters": params,
        "inputs": inputs,
        "outputs": outputs,
        "created_unix": time.time(),  # wall-clock; excluded from reproducibility
    }
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _emit_table(headers, rows, out: str | None, fmt: str) -> None:
    sep = {"tsv": "\t"}[fmt]
    lines = [sep.join(headers)]
    for row in rows:
        lines.append(sep.join(_fmt_cell(c) for c in row))
    text = "\n".join(lines) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _fmt_cell(c) -> str:
    if isinstance(c, float):
        return f"{c:.9g}"
    return str(c)


def _csv_floats(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ValueError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _gen_inputs(rng: RngStream, samples: int, seq: int, d_model: int) -> np.ndarray:
    return rng.next_generator().standard_normal((samples, seq, d_model), dtype=np.float32)


def _hist_path(out_dir: Path, block: int, pos: TapPosition) -> Path:
    return out_dir / f"block{block}_{pos.value}.hist"


def _load_taps(hist_dir: Path, model) -> list[dict]:
    per_block = []
    for b in range(len(model.blocks)):
        taps = {}
        for pos in TapPosition:
            path = _hist_path(hist_dir, b, pos)
            if not path.exists():
                raise ValueError(f"missing calibration histogram {path}")
            taps[pos] = HiddenStateTap(pos, load_histogram(path))
        per_block.append(taps)
    return per_block


# --- subcommands ----------------------------------------------------------


def cmd_gen_model(args) -> int:
    model = gen_model(RngStream(args.seed), args.blocks, args.d_model, args.heads, args.d_ff)
    out = Path(args.out)
    save_model(out, model)
    _write_manifest(
        out.with_name(out.name + ".manifest.json"), "gen-model", args.seed,
        {"blocks": args.blocks, "d_model": args.d_model, "heads": args.heads,
         "d_ff": args.d_ff, "out": str(out)},
        [], [str(out)],
    )
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model = load_model(args.model)
    rng = RngStream(args.seed)
    batch = _gen_inputs(rng, args.samples, args.seq, model.d_model)
    per_block = calibrate_model(model, batch, bins=args.bins)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for b, taps in enumerate(per_block):
        for pos, tap in taps.items():
            path = _hist_path(out_dir, b, pos)
            save_histogram(path, tap.histogram)
            written.append(str(path))
    _write_manifest(
        out_dir / "manifest.json", "calibrate", args.seed,
        {"model": args.model, "samples": args.samples, "seq": args.seq, "bins": args.bins},
        [args.model], written,
    )
    return EXIT_OK


def cmd_greedy(args) -> int:
    model = load_model(args.model)
    per_block_taps = _load_taps(Path(args.hists), model)
    rng = RngStream(args.seed)
    batch = _gen_inputs(rng, args.samples, args.seq, model.d_model)
    block_inputs = model_block_inputs(model, batch)
    policy = StepPolicy(alpha=args.alpha)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    traces = []
    for b, (block, taps, x_cal) in enumerate(zip(model.blocks, per_block_taps, block_inputs)):
        trace = greedy_optimize(block, taps, x_cal, policy, block_id=f"block{b}")
        traces.append(trace)
        path = out_dir / f"trace_block{b}.tealg"
        save_trace(path, trace)
        written.append(str(path))

    targets = _csv_floats(args.targets)
    for target in targets:
        failures = [t.block_id for t in traces
                    if t.steps[-1].block_sparsity < target]
        if failures:
            raise ValueError(
                f"target {target} beyond trace range for blocks: {', '.join(failures)}"
            )
        configs = [select_config(trace, target, taps)
                   for trace, taps in zip(traces, per_block_taps)]
        path = out_dir / f"config_p{target:g}.tealc"
        save_configs(path, configs, target)
        written.append(str(path))

    _write_manifest(
        out_dir / "manifest.json", "greedy", args.seed,
        {"model": args.model, "hists": args.hists, "alpha": args.alpha,
         "targets": targets, "samples": args.samples, "seq": args.seq},
        [args.model, args.hists], written,
    )
    return EXIT_OK


def _eval_rows(model, per_block_configs, label, batch):
    """One table row per block: isolated block error, model error, and the
    MLP input-vs-output intermediate errors at the block's up-level."""
    dense_out = model_forward_dense(model, batch)
    sparse_out = model_forward_sparse(model, batch, per_block_configs)
    num = float(np.linalg.norm((dense_out - sparse_out).astype(np.float64)))
    den = float(np.linalg.norm(dense_out.astype(np.float64)))
    model_err = num / den if den > 0 else 0.0

    rows = []
    inputs = model_block_inputs(model, batch)
    for b, (block, cfg, x) in enumerate(zip(model.blocks, per_block_configs, inputs)):
        err_block = block_relative_error(block, x, cfg)
        p_mlp = cfg.levels["up"]
        h = mlp_input(block, x)
        err_in = intermediate_error_input_sparsity(block, h, p_mlp)
        err_out = intermediate_error_output_sparsity(block, h, p_mlp)
        rows.append((label, b, err_block, model_err, err_in, err_out))
    return rows


def cmd_eval(args) -> int:
    model = load_model(args.model)
    rng = RngStream(args.seed)
    batch = _gen_inputs(rng, args.samples, args.seq, model.d_model)
    rows = []
    inputs = [args.model]
    if args.config:
        configs, target = load_configs(args.config)
        if len(configs) != len(model.blocks):
            raise ValueError(
                f"config has {len(configs)} blocks but model has {len(model.blocks)}"
            )
        inputs.append(args.config)
        rows.extend(_eval_rows(model, configs, target, batch))
    else:
        per_block_taps = _load_taps(Path(args.hists), model)
        inputs.append(args.hists)
        for p in _csv_floats(args.uniform):
            configs = [uniform_config(taps, p) for taps in per_block_taps]
            rows.extend(_eval_rows(model, configs, p, batch))
    headers = ("p", "block", "rel_err_block", "rel_err_model",
               "mlp_err_input_sparse", "mlp_err_output_sparse")
    _emit_table(headers, rows, args.out, args.format)
    if args.out:
        _write_manifest(
            Path(args.out + ".manifest.json"), "eval", args.seed,
            {"model": args.model, "config": args.config, "uniform": args.uniform,
             "samples": args.samples, "seq": args.seq},
            inputs, [args.out],
        )
    return EXIT_OK


def cmd_theory(args) -> int:
    rng = RngStream(args.seed)
    mode = MaskMode(args.mode)
    rows = []
    for p in _csv_floats(args.p_grid):
        mean, stderr = mc_relative_error(args.m, args.n, p, args.trials, mode, rng)
        rows.append((p, relative_error_magnitude(p), relative_error_random(p), mean, stderr))
    headers = ("p", "analytic_magnitude", "analytic_random", "mc_mean", "mc_stderr")
    _emit_table(headers, rows, args.out, args.format)
    if args.out:
        _write_manifest(
            Path(args.out + ".manifest.json"), "theory", args.seed,
            {"p_grid": args.p_grid, "m": args.m, "n": args.n,
             "trials": args.trials, "mode": args.mode},
            [], [args.out],
        )
    return EXIT_OK


def cmd_bench(args) -> int:
    result = bench_gemv(args.rows, args.cols, _csv_floats(args.sparsities),
                        args.reps, args.warmup, RngStream(args.seed))
    rows = []
    for pt in result.points:
        rows.append((
            pt.sparsity, pt.median_ns, pt.min_ns, result.dense_median_ns,
            result.dense_median_ns / pt.median_ns, pt.traffic.weight_bytes_sparse,
        ))
    headers = ("sparsity", "median_ns", "min_ns", "dense_median_ns", "speedup", "weight_bytes")
    _emit_table(headers, rows, args.out, args.format)
    if args.out:
        _write_manifest(
            Path(args.out + ".manifest.json"), "bench", args.seed,
            {"rows": args.rows, "cols": args.cols, "sparsities": args.sparsities,
             "reps": args.reps, "warmup": args.warmup},
            [], [args.out],
        )
    return EXIT_OK


# --- parser ----------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--format", choices=("tsv",), default="tsv",
                   help="table format (default tsv)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actsparse",
        description="Activation-sparsity experiments on toy transformer blocks.",
    )
    parser.add_argument("--version", action="version", version=f"actsparse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="generate a seeded toy model file")
    _add_common(p)
    p.add_argument("--blocks", type=int, default=DEFAULT_BLOCKS)
    p.add_argument("--d-model", type=int, default=DEFAULT_D_MODEL)
    p.add_argument("--heads", type=int, default=DEFAULT_HEADS)
    p.add_argument("--d-ff", type=int, default=DEFAULT_D_FF)
    p.add_argument("--out", required=True, help="output model path")
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("calibrate", help="collect per-tap magnitude histograms")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--samples", type=int, default=10, help="calibration sequences")
    p.add_argument("--seq", type=int, default=DEFAULT_SEQ)
    p.add_argument("--bins", type=int, default=DEFAULT_BIN_COUNT)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("greedy", help="greedy per-matrix sparsity search")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--hists", required=True, help="calibration histogram directory")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--targets", default="0.25,0.4,0.5,0.65",
                   help="comma-separated block-level sparsity targets")
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seq", type=int, default=DEFAULT_SEQ)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_greedy)

    p = sub.add_parser("eval", help="error sweep for a config or uniform levels")
    _add_common(p)
    p.add_argument("--model", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--config", help="config file from the greedy subcommand")
    group.add_argument("--uniform", help="comma-separated uniform sparsity levels")
    p.add_argument("--hists", help="histogram directory (required with --uniform)")
    p.add_argument("--samples", type=int, default=4)
    p.add_argument("--seq", type=int, default=DEFAULT_SEQ)
    p.add_argument("--out", help="write the table here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("theory", help="analytic vs Monte Carlo error table")
    _add_common(p)
    p.add_argument("--p-grid", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--m", type=int, default=1024)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--mode", choices=[m.value for m in MaskMode], default="magnitude")
    p.add_argument("--out")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("bench", help="sparse GEMV latency/traffic benchmark")
    _add_common(p)
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--cols", type=int, default=14336)
    p.add_argument("--sparsities", default="0,0.25,0.5,0.9")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and args.uniform and not args.hists:
        parser.error("--uniform requires --hists")
    try:
        return args.func(args)
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
