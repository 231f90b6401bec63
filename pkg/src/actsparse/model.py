"""Seeded miniature pre-norm transformer block: seven weight matrices,
RMSNorm, causal multi-head attention, gated (SiLU) MLP.

The block is the testbed for sparsity experiments. Its forward pass comes
in two flavors: dense, and input-sparse where each of the seven matrix
inputs is thresholded with its own calibrated cutoff before the multiply.
A gate-masked MLP variant (output sparsity on the up projection, driven by
thresholding the SiLU gate) is included for the input-vs-output error
comparison, along with per-position activation taps for calibration.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO, Mapping, Sequence

import numpy as np

from .sparsifier import DEFAULT_BIN_COUNT, HI_STD_MULTIPLE, ActivationHistogram, sparsify
from .tensor import Layout, Matrix, RngStream, read_matrix, write_matrix

MODEL_MAGIC = "TEALM1"

MATRIX_NAMES = ("q", "k", "v", "o", "gate", "up", "down")

# Desk-scale defaults: seconds-scale forwards, Llama-like d_ff/d_model ratio.
DEFAULT_D_MODEL = 256
DEFAULT_HEADS = 4
DEFAULT_D_FF = 704
DEFAULT_SEQ = 128
DEFAULT_BLOCKS = 4

RMSNORM_EPS = 1e-6


class TapPosition(Enum):
    """The four sparsifiable input positions inside one block."""

    PRE_ATTN = "pre_attn"    # q/k/v input (post attention-norm); k and v share this tap
    ATTN_OUT = "attn_out"    # o input (attention context)
    PRE_MLP = "pre_mlp"      # gate/up input (post mlp-norm)
    MLP_INTER = "mlp_inter"  # down input (gated intermediate)


MATRIX_TAP: Mapping[str, TapPosition] = {
    "q": TapPosition.PRE_ATTN,
    "k": TapPosition.PRE_ATTN,
    "v": TapPosition.PRE_ATTN,
    "o": TapPosition.ATTN_OUT,
    "gate": TapPosition.PRE_MLP,
    "up": TapPosition.PRE_MLP,
    "down": TapPosition.MLP_INTER,
}


@dataclass(frozen=True, eq=False)
class TransformerBlock:
    d_model: int
    n_heads: int
    d_ff: int
    weights: Mapping[str, Matrix]
    rms_attn: np.ndarray
    rms_mlp: np.ndarray

    def __post_init__(self):
        if self.d_model < 1 or self.d_ff < 1 or self.n_heads < 1:
            raise ValueError("block dimensions must be positive")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by {self.n_heads} heads"
            )
        if set(self.weights) != set(MATRIX_NAMES):
            raise ValueError(f"weights must be keyed by {MATRIX_NAMES}")
        expect = self._expected_shapes()
        for name, w in self.weights.items():
            if (w.rows, w.cols) != expect[name]:
                raise ValueError(
                    f"W_{name} has shape {w.rows}x{w.cols}, expected "
                    f"{expect[name][0]}x{expect[name][1]}"
                )
        for vec in (self.rms_attn, self.rms_mlp):
            if vec.shape != (self.d_model,):
                raise ValueError("norm scale vectors must have length d_model")

    def _expected_shapes(self):
        d, f = self.d_model, self.d_ff
        return {"q": (d, d), "k": (d, d), "v": (d, d), "o": (d, d),
                "gate": (f, d), "up": (f, d), "down": (d, f)}

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def footprints(self) -> dict[str, int]:
        """Element count of each matrix (the memory-footprint weights f_i)."""
        return {name: w.rows * w.cols for name, w in self.weights.items()}

    def w2d(self, name: str) -> np.ndarray:
        return self.weights[name].to_2d()


def gen_block(rng: RngStream, d_model: int, heads: int, d_ff: int) -> TransformerBlock:
    """Seeded block with i.i.d. N(0, 1/d_in) weights and unit norm scales."""
    if d_model < 1 or d_ff < 1 or heads < 1 or d_model % heads != 0:
        raise ValueError(f"invalid dims d_model={d_model} heads={heads} d_ff={d_ff}")
    g = rng.next_generator()
    weights = {}
    shapes = {"q": (d_model, d_model), "k": (d_model, d_model), "v": (d_model, d_model),
              "o": (d_model, d_model), "gate": (d_ff, d_model), "up": (d_ff, d_model),
              "down": (d_model, d_ff)}
    for name in MATRIX_NAMES:
        n_out, d_in = shapes[name]
        std = np.float32(1.0 / math.sqrt(d_in))
        arr = g.standard_normal((n_out, d_in), dtype=np.float32) * std
        weights[name] = Matrix.from_2d(arr, Layout.ROW_MAJOR)
    ones = np.ones(d_model, dtype=np.float32)
    return TransformerBlock(d_model, heads, d_ff, weights, ones, ones.copy())


# --- forward passes -----------------------------------------------------


def _rmsnorm(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x / np.sqrt(ms + np.float32(RMSNORM_EPS)) * scale


def _silu(z: np.ndarray) -> np.ndarray:
    return z / (np.float32(1.0) + np.exp(-z))


def _causal_attention(q, k, v, heads: int) -> np.ndarray:
    *lead, s, d = q.shape
    dh = d // heads

    def split(a):
        return np.swapaxes(a.reshape(*lead, s, heads, dh), -3, -2)

    scores = split(q) @ np.swapaxes(split(k), -1, -2)
    scores = scores / np.float32(math.sqrt(dh))
    future = np.triu(np.ones((s, s), dtype=bool), k=1)
    scores = np.where(future, np.float32(-np.inf), scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = w / w.sum(axis=-1, keepdims=True)
    ctx = w @ split(v)
    return np.swapaxes(ctx, -3, -2).reshape(*lead, s, d)


def _check_finite(a: np.ndarray, position: TapPosition) -> None:
    if not np.isfinite(a).all():
        raise FloatingPointError(f"non-finite activation at tap {position.value}")


def _forward(block, X, thresholds=None, collect=None):
    x = np.asarray(X, dtype=np.float32)
    if x.ndim not in (2, 3) or x.shape[-1] != block.d_model:
        raise ValueError(
            f"input must be [seq, {block.d_model}] or [batch, seq, {block.d_model}], "
            f"got shape {x.shape}"
        )

    def gated(name, a):
        if thresholds is None:
            return a
        return sparsify(a, thresholds[name])

    h = _rmsnorm(x, block.rms_attn)
    _check_finite(h, TapPosition.PRE_ATTN)
    if collect is not None:
        collect[TapPosition.PRE_ATTN] = h

    q = gated("q", h) @ block.w2d("q").T
    k = gated("k", h) @ block.w2d("k").T
    v = gated("v", h) @ block.w2d("v").T
    ctx = _causal_attention(q, k, v, block.n_heads)
    _check_finite(ctx, TapPosition.ATTN_OUT)
    if collect is not None:
        collect[TapPosition.ATTN_OUT] = ctx

    y = x + gated("o", ctx) @ block.w2d("o").T

    hm = _rmsnorm(y, block.rms_mlp)
    _check_finite(hm, TapPosition.PRE_MLP)
    if collect is not None:
        collect[TapPosition.PRE_MLP] = hm

    gate = _silu(gated("gate", hm) @ block.w2d("gate").T)
    up = gated("up", hm) @ block.w2d("up").T
    inter = gate * up
    _check_finite(inter, TapPosition.MLP_INTER)
    if collect is not None:
        collect[TapPosition.MLP_INTER] = inter

    return y + gated("down", inter) @ block.w2d("down").T


def block_forward_dense(block: TransformerBlock, X) -> np.ndarray:
    """Y = X + Attn(RMSNorm(X)); Y += MLP(RMSNorm(Y)). No positional encoding."""
    return _forward(block, X)


def block_forward_sparse(block: TransformerBlock, X, cfg: "BlockSparsityConfig") -> np.ndarray:
    """Dense structure, but every one of the seven matrix inputs is
    thresholded with its matrix-specific cutoff before the multiply."""
    return _forward(block, X, thresholds=cfg.thresholds)


def tap_activations(block: TransformerBlock, X) -> dict[TapPosition, np.ndarray]:
    """Dense forward, returning the raw activations at the four tap positions."""
    taps: dict[TapPosition, np.ndarray] = {}
    _forward(block, X, collect=taps)
    return taps


def tap_dim(block: TransformerBlock, position: TapPosition) -> int:
    return block.d_ff if position is TapPosition.MLP_INTER else block.d_model


# --- sparsity configuration ----------------------------------------------


@dataclass(frozen=True)
class BlockSparsityConfig:
    """Per-matrix sparsity levels and the thresholds that realize them."""

    levels: Mapping[str, float]
    thresholds: Mapping[str, float]

    def __post_init__(self):
        if set(self.levels) != set(MATRIX_NAMES) or set(self.thresholds) != set(MATRIX_NAMES):
            raise ValueError(f"config must cover exactly the matrices {MATRIX_NAMES}")
        for name in MATRIX_NAMES:
            p = self.levels[name]
            t = self.thresholds[name]
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"level for {name} outside [0, 1]: {p}")
            if not (t >= 0.0 and math.isfinite(t)):
                raise ValueError(f"threshold for {name} must be finite and >= 0: {t}")
        object.__setattr__(self, "levels", dict(self.levels))
        object.__setattr__(self, "thresholds", dict(self.thresholds))


@dataclass(frozen=True)
class HiddenStateTap:
    position: TapPosition
    histogram: ActivationHistogram


def resolve_config(
    taps: Mapping[TapPosition, HiddenStateTap], levels: Mapping[str, float]
) -> BlockSparsityConfig:
    """Turn per-matrix levels into thresholds via the tap histograms.

    k/v share the q tap histogram but may carry distinct levels, hence
    distinct thresholds from the same empirical distribution.
    """
    thresholds = {
        name: taps[MATRIX_TAP[name]].histogram.threshold(levels[name])
        for name in MATRIX_NAMES
    }
    return BlockSparsityConfig(dict(levels), thresholds)


def calibrate_block(
    block: TransformerBlock,
    samples,
    bins: int = DEFAULT_BIN_COUNT,
    layer_prefix: str = "",
) -> dict[TapPosition, HiddenStateTap]:
    """Histogram |activation| at each tap over a batch of input sequences.

    ``samples`` is a [batch, seq, d_model] array or a list of [seq, d_model]
    arrays. The histogram range is fixed from the first sequence (hi = 8x
    its per-tap std) before all sequences are recorded.
    """
    batch = np.stack([np.asarray(s, dtype=np.float32) for s in samples])
    if batch.ndim != 3 or batch.shape[0] < 1:
        raise ValueError("need at least one [seq, d_model] calibration sequence")
    taps = tap_activations(block, batch)
    out: dict[TapPosition, HiddenStateTap] = {}
    for pos, values in taps.items():
        first_std = float(values[0].std())
        if first_std <= 0.0:
            raise ValueError(f"degenerate calibration batch at tap {pos.value}")
        hist = ActivationHistogram.empty(
            f"{layer_prefix}{pos.value}", bins, HI_STD_MULTIPLE * first_std
        )
        hist.record(values)
        out[pos] = HiddenStateTap(pos, hist)
    return out


# --- MLP-level input-vs-output sparsity ----------------------------------
#
# These operate on the hidden state the MLP consumes (use mlp_input to
# derive it from a block input). Thresholds come from exact empirical
# quantiles of the batch at hand, so the realized sparsity equals the
# requested level and the comparison isolates masking strategy from
# estimator error. The gate projection is computed densely in all of them.


def mlp_input(block: TransformerBlock, X) -> np.ndarray:
    """Hidden state entering the MLP: RMSNorm(X + Attn(RMSNorm(X)))."""
    x = np.asarray(X, dtype=np.float32)
    h = _rmsnorm(x, block.rms_attn)
    q = h @ block.w2d("q").T
    k = h @ block.w2d("k").T
    v = h @ block.w2d("v").T
    y = x + _causal_attention(q, k, v, block.n_heads) @ block.w2d("o").T
    return _rmsnorm(y, block.rms_mlp)


def mlp_forward_dense(block: TransformerBlock, H) -> np.ndarray:
    h = np.asarray(H, dtype=np.float32)
    gate = _silu(h @ block.w2d("gate").T)
    return (gate * (h @ block.w2d("up").T)) @ block.w2d("down").T


def _quantile_threshold(mags: np.ndarray, p: float) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"sparsity must lie in [0, 1], got {p}")
    if p == 0.0:
        return 0.0
    return float(np.quantile(mags, p))


def mlp_forward_output_sparse(block: TransformerBlock, H, p: float) -> np.ndarray:
    """Gate-masked MLP: threshold SiLU(h W_gate^T) at level p and let the
    mask drive output sparsity on the up projection. The sparse intermediate
    then gives input sparsity on the down projection for free."""
    h = np.asarray(H, dtype=np.float32)
    gate = _silu(h @ block.w2d("gate").T)
    t = _quantile_threshold(np.abs(gate), p)
    masked = sparsify(gate, t)
    inter = masked * (h @ block.w2d("up").T)
    return inter @ block.w2d("down").T


def _fro(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(a, dtype=np.float64))))


def intermediate_error_input_sparsity(block: TransformerBlock, H, p: float) -> float:
    """Relative error of the gated intermediate when the MLP input is
    magnitude-pruned at level p (up projection sees the sparse input)."""
    h = np.asarray(H, dtype=np.float32)
    gate = _silu(h @ block.w2d("gate").T)
    up = h @ block.w2d("up").T
    denom = _fro(up * gate)
    if denom == 0.0:
        raise ValueError("unsparsified product has zero norm")
    t = _quantile_threshold(np.abs(h), p)
    dropped = h - sparsify(h, t)
    return _fro((dropped @ block.w2d("up").T) * gate) / denom


def intermediate_error_output_sparsity(block: TransformerBlock, H, p: float) -> float:
    """Relative error of the gated intermediate when the SiLU gate output is
    magnitude-pruned at level p (mask applied to the dense up product)."""
    h = np.asarray(H, dtype=np.float32)
    gate = _silu(h @ block.w2d("gate").T)
    up = h @ block.w2d("up").T
    denom = _fro(up * gate)
    if denom == 0.0:
        raise ValueError("unsparsified product has zero norm")
    t = _quantile_threshold(np.abs(gate), p)
    dropped = gate - sparsify(gate, t)
    return _fro(up * dropped) / denom


# --- multi-block model ----------------------------------------------------


@dataclass(frozen=True, eq=False)
class TransformerModel:
    d_model: int
    n_heads: int
    d_ff: int
    blocks: tuple[TransformerBlock, ...]

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("model needs at least one block")


def gen_model(rng: RngStream, n_blocks: int, d_model: int, heads: int, d_ff: int) -> TransformerModel:
    if n_blocks < 1:
        raise ValueError(f"need at least one block, got {n_blocks}")
    blocks = tuple(gen_block(rng.child(b), d_model, heads, d_ff) for b in range(n_blocks))
    return TransformerModel(d_model, heads, d_ff, blocks)


def model_forward_dense(model: TransformerModel, X) -> np.ndarray:
    x = np.asarray(X, dtype=np.float32)
    for block in model.blocks:
        x = block_forward_dense(block, x)
    return x


def model_forward_sparse(model: TransformerModel, X, configs: Sequence[BlockSparsityConfig]) -> np.ndarray:
    if len(configs) != len(model.blocks):
        raise ValueError(f"got {len(configs)} configs for {len(model.blocks)} blocks")
    x = np.asarray(X, dtype=np.float32)
    for block, cfg in zip(model.blocks, configs):
        x = block_forward_sparse(block, x, cfg)
    return x


def model_block_inputs(model: TransformerModel, X) -> list[np.ndarray]:
    """Dense hidden states entering each block (index 0 is X itself)."""
    x = np.asarray(X, dtype=np.float32)
    inputs = []
    for block in model.blocks:
        inputs.append(x)
        x = block_forward_dense(block, x)
    return inputs


def calibrate_model(
    model: TransformerModel, samples, bins: int = DEFAULT_BIN_COUNT
) -> list[dict[TapPosition, HiddenStateTap]]:
    """Calibrate every block on the dense hidden states it actually sees."""
    batch = np.stack([np.asarray(s, dtype=np.float32) for s in samples])
    per_block = []
    for b, (block, x) in enumerate(zip(model.blocks, model_block_inputs(model, batch))):
        per_block.append(calibrate_block(block, x, bins, layer_prefix=f"block{b}/"))
    return per_block


# --- model file format ----------------------------------------------------
#
# "TEALM1 <blocks> <d_model> <heads> <d_ff>\n", then per block the seven
# matrices in fixed order q,k,v,o,gate,up,down in the weight format,
# followed by the two norm-scale vectors as 1 x d_model weight sections.


def write_model(fh: BinaryIO, model: TransformerModel) -> None:
    fh.write(
        f"{MODEL_MAGIC} {len(model.blocks)} {model.d_model} "
        f"{model.n_heads} {model.d_ff}\n".encode("ascii")
    )
    for block in model.blocks:
        for name in MATRIX_NAMES:
            write_matrix(fh, block.weights[name])
        for vec in (block.rms_attn, block.rms_mlp):
            write_matrix(fh, Matrix.from_2d(vec[None, :], Layout.ROW_MAJOR))


def read_model(fh: BinaryIO) -> TransformerModel:
    header = fh.readline().decode("ascii", errors="replace").strip().split()
    if len(header) != 5 or header[0] != MODEL_MAGIC:
        raise ValueError(f"bad model header: {header!r}")
    n_blocks, d_model, heads, d_ff = (int(v) for v in header[1:])
    blocks = []
    for _ in range(n_blocks):
        weights = {name: read_matrix(fh) for name in MATRIX_NAMES}
        rms_attn = read_matrix(fh).to_2d().ravel().copy()
        rms_mlp = read_matrix(fh).to_2d().ravel().copy()
        blocks.append(TransformerBlock(d_model, heads, d_ff, weights, rms_attn, rms_mlp))
    return TransformerModel(d_model, heads, d_ff, tuple(blocks))


def save_model(path: str | os.PathLike, model: TransformerModel) -> None:
    with open(path, "wb") as fh:
        write_model(fh, model)


def load_model(path: str | os.PathLike) -> TransformerModel:
    with open(path, "rb") as fh:
        return read_model(fh)
