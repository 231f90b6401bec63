"""Magnitude sparsification and its calibration machinery.

The sparsification rule is a single scalar threshold per tensor: entries
with magnitude at or below the threshold are zeroed, the rest pass through
untouched. Thresholds are calibrated from fixed-memory histograms of
activation magnitudes collected offline, inverted by linear interpolation
within the located bin. A batched variant thresholds the per-column mean
magnitude so the whole batch shares one column mask.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

HISTOGRAM_MAGIC = "TEALH1"

DEFAULT_BIN_COUNT = 4096
HI_STD_MULTIPLE = 8.0  # histogram upper bound = 8x the std of the first batch


class DistFamily(Enum):
    GAUSSIAN = "gaussian"
    LAPLACE = "laplace"


@dataclass
class ActivationHistogram:
    """Per-layer empirical distribution of activation magnitudes.

    Uniform bins on [0, hi): bin b covers [b*w, (b+1)*w) with w = hi/bin_count,
    except the last bin which is closed at hi. Magnitudes above hi go to the
    overflow bucket. Mutated by a single owner during calibration; use
    :meth:`merge` to combine per-worker histograms with identical binning.
    """

    layer_id: str
    bin_count: int
    lo: float
    hi: float
    counts: np.ndarray = field(repr=False)
    overflow_count: int = 0
    total: int = 0

    def __post_init__(self):
        if self.bin_count < 1:
            raise ValueError(f"bin_count must be >= 1, got {self.bin_count}")
        if self.lo != 0.0:
            raise ValueError("histogram lower bound must be 0 (magnitudes)")
        if not self.hi > 0:
            raise ValueError(f"histogram upper bound must be positive, got {self.hi}")
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.bin_count,):
            raise ValueError("counts length must equal bin_count")
        if (self.counts < 0).any() or self.overflow_count < 0:
            raise ValueError("negative bin counts")
        if self.total != int(self.counts.sum()) + self.overflow_count:
            raise ValueError("total != sum(counts) + overflow_count")

    @classmethod
    def empty(cls, layer_id: str, bin_count: int, hi: float) -> "ActivationHistogram":
        return cls(layer_id, bin_count, 0.0, float(hi),
                   np.zeros(bin_count, dtype=np.int64), 0, 0)

    def record(self, x) -> "ActivationHistogram":
        """Add |x_i| for every entry of x; values above hi count as overflow."""
        m = np.abs(np.asarray(x, dtype=np.float64)).ravel()
        if np.isnan(m).any():
            raise ValueError("cannot record NaN activations")
        if m.size == 0:
            return self
        over = m > self.hi
        kept = m[~over]
        if kept.size:
            idx = np.floor(kept / self.hi * self.bin_count).astype(np.int64)
            np.clip(idx, 0, self.bin_count - 1, out=idx)  # |x| == hi lands in the last bin
            np.add.at(self.counts, idx, 1)
        self.overflow_count += int(over.sum())
        self.total += int(m.size)
        return self

    def merge(self, other: "ActivationHistogram") -> "ActivationHistogram":
        """Bin-wise addition; binning must match exactly."""
        if (other.bin_count, other.lo, other.hi) != (self.bin_count, self.lo, self.hi):
            raise ValueError("cannot merge histograms with different binning")
        self.counts += other.counts
        self.overflow_count += other.overflow_count
        self.total += other.total
        return self

    def threshold(self, p: float) -> float:
        """Smallest bin-interpolated t with empirical CDF(t) >= p.

        p=0 gives 0; p=1 gives hi (prunes everything observed in range).
        """
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"sparsity must lie in [0, 1], got {p}")
        if self.total < 1:
            raise ValueError("cannot estimate a threshold from an empty histogram")
        if p == 0.0:
            return 0.0
        if p == 1.0:
            return self.hi
        cum = np.cumsum(self.counts) / self.total
        idx = int(np.searchsorted(cum, p, side="left"))
        if idx >= self.bin_count:
            return self.hi  # target mass sits in the overflow bucket
        prev = float(cum[idx - 1]) if idx > 0 else 0.0
        mass = float(cum[idx]) - prev
        width = self.hi / self.bin_count
        left = idx * width
        if mass <= 0.0:
            return left
        return left + (p - prev) / mass * width


def sparsify(x, t: float) -> np.ndarray:
    """Zero every entry with |x_i| <= t (closed boundary); keep the rest."""
    if not t >= 0.0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    a = np.asarray(x, dtype=np.float32)
    return np.where(np.abs(a) <= t, np.float32(0.0), a)


def realized_sparsity(x, t: float) -> float:
    """Fraction of entries with |x_i| <= t."""
    a = np.asarray(x, dtype=np.float32)
    if a.size == 0:
        raise ValueError("realized sparsity of an empty vector is undefined")
    return float(np.count_nonzero(np.abs(a) <= t)) / a.size


def sparsify_batched(xs, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Shared-mask sparsification over a batch.

    Column i is zeroed in every row when the mean magnitude
    (1/B) sum_b |X[b, i]| is at or below t. Returns (sparse batch, mask)
    where mask[i] is True for zeroed columns. With B=1 this reduces exactly
    to :func:`sparsify`.
    """
    if not t >= 0.0:
        raise ValueError(f"threshold must be non-negative, got {t}")
    try:
        batch = np.asarray(xs, dtype=np.float32)
    except ValueError as exc:
        raise ValueError("ragged batch: all rows must have the same length") from exc
    if batch.ndim != 2 or batch.shape[0] < 1:
        raise ValueError(f"expected a [B, m] batch with B >= 1, got shape {batch.shape}")
    mask = np.abs(batch).mean(axis=0) <= t
    out = batch.copy()
    out[:, mask] = np.float32(0.0)
    return out, mask


@dataclass(frozen=True)
class DistributionFit:
    family: DistFamily
    location: float
    scale: float
    neg_log_likelihood: float


def fit_distribution(samples, family: DistFamily) -> DistributionFit:
    """Maximum-likelihood fit: Gaussian (mean, std) or Laplace (median, MAD)."""
    s = np.asarray(samples, dtype=np.float64).ravel()
    if s.size < 2:
        raise ValueError("need at least 2 samples to fit a distribution")
    n = s.size
    if family is DistFamily.GAUSSIAN:
        loc = float(s.mean())
        scale = float(s.std())
        if scale <= 0.0:
            raise ValueError("constant samples: zero scale under a Gaussian fit")
        nll = 0.5 * n * (np.log(2.0 * np.pi * scale * scale) + 1.0)
    elif family is DistFamily.LAPLACE:
        loc = float(np.median(s))
        scale = float(np.abs(s - loc).mean())
        if scale <= 0.0:
            raise ValueError("constant samples: zero scale under a Laplace fit")
        nll = n * (np.log(2.0 * scale) + 1.0)
    else:
        raise ValueError(f"unknown family {family!r}")
    return DistributionFit(family, loc, scale, float(nll))


# --- histogram file format ----------------------------------------------
#
# Text. Line 1: "TEALH1 <layer_id> <bin_count> <lo> <hi> <total> <overflow>",
# then bin_count lines of integer counts. Serialization is deterministic;
# floats use repr-precision so thresholds survive a round trip exactly.


def save_histogram(path: str | os.PathLike, hist: ActivationHistogram) -> None:
    if any(ch.isspace() for ch in hist.layer_id):
        raise ValueError(f"layer_id must not contain whitespace: {hist.layer_id!r}")
    lines = [
        f"{HISTOGRAM_MAGIC} {hist.layer_id} {hist.bin_count} "
        f"{hist.lo:.17g} {hist.hi:.17g} {hist.total} {hist.overflow_count}"
    ]
    lines.extend(str(int(c)) for c in hist.counts)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def load_histogram(path: str | os.PathLike) -> ActivationHistogram:
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip().split()
        if len(header) != 7 or header[0] != HISTOGRAM_MAGIC:
            raise ValueError(f"bad histogram header in {path}")
        layer_id = header[1]
        bin_count = int(header[2])
        lo, hi = float(header[3]), float(header[4])
        total, overflow = int(header[5]), int(header[6])
        counts = np.array([int(fh.readline()) for _ in range(bin_count)], dtype=np.int64)
    return ActivationHistogram(layer_id, bin_count, lo, hi, counts, overflow, total)
