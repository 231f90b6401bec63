"""Deterministic float32 substrate: layout-tagged matrices, vectors, seeded sampling.

Everything downstream (sparsification, the toy blocks, the sparse kernel)
is built on three contracts enforced here:

* all data is 32-bit float, and the reference mat-vec accumulates in
  32-bit floats in a fixed order (ascending logical column index), so
  results are bit-identical regardless of physical layout;
* matrices carry an explicit row-major / column-major tag, and layout
  conversion is a bit-exact permutation;
* random sampling is counter-based (Philox keyed by seed + call index),
  so identical seeds give identical streams on every platform.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from enum import Enum
from typing import BinaryIO

import numpy as np
from numba import njit

WEIGHT_MAGIC = "TEALW1"

_CHILD_TAG = 0x9E3779B9  # keeps child-stream keys disjoint from draw counters


class Layout(Enum):
    ROW_MAJOR = "rowmajor"
    COL_MAJOR = "colmajor"


def as_vector(x) -> np.ndarray:
    """Coerce to a 1-D float32 array (the vector type used throughout)."""
    v = np.asarray(x, dtype=np.float32)
    if v.ndim != 1:
        raise ValueError(f"expected a 1-D vector, got shape {v.shape}")
    return v


@dataclass(frozen=True, eq=False)
class Matrix:
    """2-D float32 matrix with an explicit physical layout.

    ``data`` is flat storage of length rows*cols. Element (i, j) lives at
    i*cols + j under ROW_MAJOR and at j*rows + i under COL_MAJOR. Instances
    are read-only after construction and safe to share across workers.
    """

    rows: int
    cols: int
    layout: Layout
    data: np.ndarray

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"invalid matrix shape {self.rows}x{self.cols}")
        d = self.data
        if not isinstance(d, np.ndarray) or d.dtype != np.float32 or d.ndim != 1:
            raise ValueError("matrix data must be a flat float32 array")
        if d.size != self.rows * self.cols:
            raise ValueError(
                f"data length {d.size} does not match rows*cols = {self.rows * self.cols}"
            )
        d.flags.writeable = False

    @classmethod
    def from_2d(cls, arr, layout: Layout = Layout.ROW_MAJOR) -> "Matrix":
        a = np.asarray(arr, dtype=np.float32)
        if a.ndim != 2:
            raise ValueError(f"expected a 2-D array, got shape {a.shape}")
        order = "C" if layout is Layout.ROW_MAJOR else "F"
        flat = a.ravel(order=order)
        if flat.base is not None and flat.base is a:
            flat = flat.copy()
        return cls(a.shape[0], a.shape[1], layout, flat)

    def to_2d(self) -> np.ndarray:
        """Logical [rows, cols] view of the flat storage (no copy)."""
        order = "C" if self.layout is Layout.ROW_MAJOR else "F"
        return self.data.reshape((self.rows, self.cols), order=order)

    def at(self, i: int, j: int) -> float:
        if self.layout is Layout.ROW_MAJOR:
            return float(self.data[i * self.cols + j])
        return float(self.data[j * self.rows + i])


def to_layout(w: Matrix, layout: Layout) -> Matrix:
    """Re-store the same logical elements under a new physical layout."""
    if w.layout is layout:
        return w
    order = "C" if layout is Layout.ROW_MAJOR else "F"
    return Matrix(w.rows, w.cols, layout, w.to_2d().ravel(order=order))


# --- reference mat-vec --------------------------------------------------
#
# y_j = sum_i x_i * W[j, i], accumulated in float32 in ascending i.
# Two loops, one per physical layout, performing the identical sequence of
# float32 operations: results are bit-equal across layouts. No BLAS here;
# this is the trusted reference path.


@njit(cache=True)
def _gemv_rowmajor(x, data, rows, cols):
    y = np.empty(rows, dtype=np.float32)
    for j in range(rows):
        acc = np.float32(0.0)
        base = j * cols
        for i in range(cols):
            acc += x[i] * data[base + i]
        y[j] = acc
    return y


@njit(cache=True)
def _gemv_colmajor(x, data, rows, cols):
    y = np.empty(rows, dtype=np.float32)
    for j in range(rows):
        acc = np.float32(0.0)
        for i in range(cols):
            acc += x[i] * data[i * rows + j]
        y[j] = acc
    return y


def matmul_dense(x, w: Matrix) -> np.ndarray:
    """Reference y = x W^T for x of length w.cols; returns length w.rows."""
    v = as_vector(x)
    if v.size != w.cols:
        raise ValueError(
            f"dimension mismatch: x has length {v.size}, W is {w.rows}x{w.cols} "
            f"(expected x length {w.cols})"
        )
    if w.layout is Layout.ROW_MAJOR:
        return _gemv_rowmajor(v, w.data, w.rows, w.cols)
    return _gemv_colmajor(v, w.data, w.rows, w.cols)


# --- seeded sampling ----------------------------------------------------


class RngStream:
    """Counter-based deterministic random stream.

    Each draw derives a fresh Philox generator from (seed, counter) and
    bumps the counter, so any draw is a pure function of the stream state
    and its arguments. A stream has a single owner; for parallel work,
    split with :meth:`child`, which derives an independent seed.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed)
        self.counter = int(counter)

    def _entropy(self) -> int:
        return self.seed & 0xFFFF_FFFF_FFFF_FFFF

    def next_generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self._entropy(), spawn_key=(self.counter,))
        self.counter += 1
        return np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "RngStream":
        ss = np.random.SeedSequence(entropy=self._entropy(), spawn_key=(_CHILD_TAG, int(index)))
        return RngStream(int(ss.generate_state(1, np.uint64)[0]))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"


def sample_gaussian(rng: RngStream, n: int, sigma: float) -> np.ndarray:
    """n i.i.d. N(0, sigma^2) float32 samples; standard draws scaled by sigma."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    z = rng.next_generator().standard_normal(n, dtype=np.float32)
    return z * np.float32(sigma)


def sample_laplace(rng: RngStream, n: int, scale: float) -> np.ndarray:
    """n i.i.d. Laplace(0, scale) float32 samples."""
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    z = rng.next_generator().laplace(0.0, 1.0, size=n)
    return (z * scale).astype(np.float32)


# --- weight file format -------------------------------------------------
#
# Header line b"TEALW1 <rows> <cols> <layout>\n", then rows*cols
# little-endian float32 in logical row-major order regardless of the
# in-memory layout. Round trip is bit-exact.


def write_matrix(fh: BinaryIO, w: Matrix) -> None:
    fh.write(f"{WEIGHT_MAGIC} {w.rows} {w.cols} {w.layout.value}\n".encode("ascii"))
    fh.write(w.to_2d().astype("<f4", copy=False).tobytes(order="C"))


def read_matrix(fh: BinaryIO) -> Matrix:
    header = fh.readline().decode("ascii", errors="replace").strip()
    parts = header.split()
    if len(parts) != 4 or parts[0] != WEIGHT_MAGIC:
        raise ValueError(f"bad weight header: {header!r}")
    rows, cols = int(parts[1]), int(parts[2])
    try:
        layout = Layout(parts[3])
    except ValueError:
        raise ValueError(f"unknown layout tag {parts[3]!r} in weight header") from None
    nbytes = rows * cols * 4
    payload = fh.read(nbytes)
    if len(payload) != nbytes:
        raise ValueError(f"truncated weight payload: expected {nbytes} bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32, copy=True)
    arr = flat.reshape(rows, cols)
    return Matrix.from_2d(arr, layout)


def save_matrix(path: str | os.PathLike, w: Matrix) -> None:
    with open(path, "wb") as fh:
        write_matrix(fh, w)


def load_matrix(path: str | os.PathLike) -> Matrix:
    with open(path, "rb") as fh:
        return read_matrix(fh)
