"""Footprint-weighted greedy allocation of per-matrix sparsity levels.

One step of the loop tries to raise each matrix's level by a step inversely
proportional to its memory footprint (so every commit raises the block-level
sparsity P by the same alpha), evaluates the full sparse block forward for
each candidate against the dense ground truth, and commits the increment
with the lowest L2 error. The recorded (P, levels) staircase is the trace;
a config for a target P is the first recorded step at or above it.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import (
    MATRIX_NAMES,
    MATRIX_TAP,
    BlockSparsityConfig,
    HiddenStateTap,
    TapPosition,
    TransformerBlock,
    block_forward_dense,
    block_forward_sparse,
    resolve_config,
)

TRACE_MAGIC = "TEALG1"
CONFIG_MAGIC = "TEALC1"

_IDENTITY_P = 1e-9  # tolerance for the bookkeeping identity P = sum(p_i f_i)/F


@dataclass(frozen=True)
class StepPolicy:
    """Base step size; per-matrix increments are alpha * F / f_i, capped at 1."""

    alpha: float
    cap: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.cap != 1.0:
            raise ValueError("levels are capped at 1.0")


@dataclass(frozen=True)
class GreedyStep:
    block_sparsity: float
    levels: Mapping[str, float]
    chosen: str | None
    error: float


@dataclass
class GreedyTrace:
    block_id: str
    alpha: float
    steps: list[GreedyStep]


def _fro(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(a, dtype=np.float64))))


def _block_sparsity(levels: Mapping[str, float], footprints: Mapping[str, int]) -> float:
    total = sum(footprints.values())
    return sum(levels[n] * footprints[n] for n in MATRIX_NAMES) / total


def greedy_optimize(
    block: TransformerBlock,
    taps: Mapping[TapPosition, HiddenStateTap],
    x_cal,
    policy: StepPolicy,
    block_id: str = "block0",
) -> GreedyTrace:
    """Run the greedy staircase until block-level sparsity reaches 1.

    Candidate evaluation holds all other matrices at their committed levels
    (a shared mutable config with only matrix i perturbed). Ties in the
    error argmin break toward the fixed matrix order q,k,v,o,gate,up,down.
    """
    if not taps:
        raise ValueError("block is not calibrated: tap histograms are required")
    x = np.asarray(x_cal, dtype=np.float32)
    footprints = block.footprints()
    total_f = sum(footprints.values())
    deltas = {n: policy.alpha * total_f / footprints[n] for n in MATRIX_NAMES}

    y_gt = block_forward_dense(block, x)
    levels = {n: 0.0 for n in MATRIX_NAMES}
    steps = [GreedyStep(0.0, dict(levels), None, 0.0)]
    threshold_cache: dict[tuple[str, float], float] = {}

    def resolve(trial_levels: Mapping[str, float]) -> BlockSparsityConfig:
        thresholds = {}
        for n in MATRIX_NAMES:
            key = (n, trial_levels[n])
            if key not in threshold_cache:
                threshold_cache[key] = taps[MATRIX_TAP[n]].histogram.threshold(trial_levels[n])
            thresholds[n] = threshold_cache[key]
        return BlockSparsityConfig(dict(trial_levels), thresholds)

    P = 0.0
    while P < 1.0:
        best_name = None
        best_level = 0.0
        best_error = math.inf
        for name in MATRIX_NAMES:
            if levels[name] >= 1.0:
                continue  # capped matrices leave the candidate set
            trial = min(levels[name] + deltas[name], 1.0)
            levels[name], saved = trial, levels[name]
            err = _fro(y_gt - block_forward_sparse(block, x, resolve(levels)))
            levels[name] = saved
            if err < best_error:
                best_name, best_level, best_error = name, trial, err
        levels[best_name] = best_level
        P = _block_sparsity(levels, footprints)
        steps.append(GreedyStep(P, dict(levels), best_name, best_error))
    return GreedyTrace(block_id, policy.alpha, steps)


def uniform_config(taps: Mapping[TapPosition, HiddenStateTap], p: float) -> BlockSparsityConfig:
    """All seven levels equal to p; block-level sparsity is then exactly p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {p}")
    return resolve_config(taps, {n: p for n in MATRIX_NAMES})


def select_step(trace: GreedyTrace, target_p: float) -> GreedyStep:
    """First recorded step with block-level sparsity >= target_p."""
    if not trace.steps:
        raise ValueError("empty trace")
    for step in trace.steps:
        if step.block_sparsity >= target_p:
            return step
    raise ValueError(
        f"target {target_p} beyond trace range (max recorded "
        f"{trace.steps[-1].block_sparsity:.6f})"
    )


def select_config(
    trace: GreedyTrace, target_p: float, taps: Mapping[TapPosition, HiddenStateTap]
) -> BlockSparsityConfig:
    return resolve_config(taps, select_step(trace, target_p).levels)


def cost_estimate(n_matrices: int, alpha: float, samples: int) -> int:
    """Forward-pass count of the greedy search: samples * n_matrices^2 / alpha."""
    if n_matrices < 1 or samples < 1 or not alpha > 0:
        raise ValueError("arguments must be positive")
    return math.ceil(samples * n_matrices * n_matrices / alpha)


def block_relative_error(block: TransformerBlock, x, cfg: BlockSparsityConfig) -> float:
    """Relative L2 error of the sparse block forward against the dense one."""
    x = np.asarray(x, dtype=np.float32)
    dense = block_forward_dense(block, x)
    denom = _fro(dense)
    if denom == 0.0:
        raise ValueError("dense output has zero norm")
    return _fro(dense - block_forward_sparse(block, x, cfg)) / denom


def validate_trace(trace: GreedyTrace, footprints: Mapping[str, int]) -> None:
    """Check the trace invariants; raises ValueError on the first violation.

    Invariants: strictly increasing P, per-matrix levels non-decreasing, and
    P equal to the footprint-weighted mean of the levels to 1e-9.
    """
    if not trace.steps:
        raise ValueError("empty trace")
    total_f = sum(footprints.values())
    prev_p = -math.inf
    prev_levels = {n: -math.inf for n in MATRIX_NAMES}
    for idx, step in enumerate(trace.steps):
        if step.block_sparsity <= prev_p:
            raise ValueError(f"step {idx}: P not strictly increasing")
        for n in MATRIX_NAMES:
            if step.levels[n] < prev_levels[n]:
                raise ValueError(f"step {idx}: level of {n} decreased")
        recomputed = sum(step.levels[n] * footprints[n] for n in MATRIX_NAMES) / total_f
        if abs(recomputed - step.block_sparsity) > _IDENTITY_P:
            raise ValueError(
                f"step {idx}: bookkeeping identity violated "
                f"({step.block_sparsity!r} vs {recomputed!r})"
            )
        prev_p = step.block_sparsity
        prev_levels = step.levels


# --- trace and config files -----------------------------------------------
#
# Trace: "TEALG1 <block_id> <alpha>" then one line per step:
# "P p_q p_k p_v p_o p_gate p_up p_down chosen error" ("-" marks the initial
# all-zero record). Config: "TEALC1 <n_blocks> <target>" then per block a
# "block <idx>" line followed by seven "name level threshold" lines.


def save_trace(path: str | os.PathLike, trace: GreedyTrace) -> None:
    lines = [f"{TRACE_MAGIC} {trace.block_id} {trace.alpha:.17g}"]
    for step in trace.steps:
        levels = " ".join(f"{step.levels[n]:.17g}" for n in MATRIX_NAMES)
        chosen = step.chosen if step.chosen is not None else "-"
        lines.append(f"{step.block_sparsity:.17g} {levels} {chosen} {step.error:.17g}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def load_trace(path: str | os.PathLike) -> GreedyTrace:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split()
        if len(header) != 3 or header[0] != TRACE_MAGIC:
            raise ValueError(f"bad trace header in {path}")
        block_id, alpha = header[1], float(header[2])
        steps = []
        for line in fh:
            parts = line.strip().split()
            if not parts:
                continue
            if len(parts) != 10:
                raise ValueError(f"bad trace line in {path}: {line!r}")
            p = float(parts[0])
            levels = {n: float(v) for n, v in zip(MATRIX_NAMES, parts[1:8])}
            chosen = None if parts[8] == "-" else parts[8]
            steps.append(GreedyStep(p, levels, chosen, float(parts[9])))
    return GreedyTrace(block_id, alpha, steps)


def save_configs(
    path: str | os.PathLike, configs: Sequence[BlockSparsityConfig], target_p: float
) -> None:
    lines = [f"{CONFIG_MAGIC} {len(configs)} {target_p:.17g}"]
    for idx, cfg in enumerate(configs):
        lines.append(f"block {idx}")
        for n in MATRIX_NAMES:
            lines.append(f"{n} {cfg.levels[n]:.17g} {cfg.thresholds[n]:.17g}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def load_configs(path: str | os.PathLike) -> tuple[list[BlockSparsityConfig], float]:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split()
        if len(header) != 3 or header[0] != CONFIG_MAGIC:
            raise ValueError(f"bad config header in {path}")
        n_blocks, target_p = int(header[1]), float(header[2])
        configs = []
        for b in range(n_blocks):
            tag = fh.readline().strip().split()
            if len(tag) != 2 or tag[0] != "block" or int(tag[1]) != b:
                raise ValueError(f"bad block marker in {path}: {tag!r}")
            levels, thresholds = {}, {}
            for n in MATRIX_NAMES:
                parts = fh.readline().strip().split()
                if len(parts) != 3 or parts[0] != n:
                    raise ValueError(f"bad config line in {path}: {parts!r}")
                levels[n] = float(parts[1])
                thresholds[n] = float(parts[2])
            configs.append(BlockSparsityConfig(levels, thresholds))
    return configs, target_p
