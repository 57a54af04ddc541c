"""Dense N-way tensors and CP factor models.

Storage is dense, row-major, 64-bit floating point.  The mode-k unfolding
places mode k on the rows and the remaining modes, in increasing order with
the last one varying fastest, on the columns.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidModelError, ParseError


class Tensor:
    """Immutable dense N-way array of finite, non-negative values."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim < 2:
            raise ValueError("tensors must have at least 2 modes")
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor entries must be finite")
        if np.any(arr < 0):
            raise ValueError("tensor entries must be non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def is_count_tensor(self, tol=0.0):
        """True if every entry is a non-negative integer (within tol)."""
        return bool(np.all(np.abs(self.data - np.round(self.data)) <= tol))

    def __eq__(self, other):
        return isinstance(other, Tensor) and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"


@dataclass(frozen=True)
class FactorModel:
    """Rank-R CP model: one non-negative I_k x R factor matrix per mode."""

    rank: int
    factors: list = field(default_factory=list)

    def __post_init__(self):
        if self.rank < 1:
            raise InvalidModelError(f"rank must be >= 1, got {self.rank}")
        if len(self.factors) < 2:
            raise InvalidModelError("a factor model needs at least two modes")
        mats = [np.asarray(f, dtype=np.float64) for f in self.factors]
        for k, f in enumerate(mats):
            if f.ndim != 2:
                raise InvalidModelError(f"factor {k} is not a matrix")
            if f.shape[1] != self.rank:
                raise InvalidModelError(
                    f"factor {k} has {f.shape[1]} columns, expected rank {self.rank}"
                )
            if not np.all(np.isfinite(f)):
                raise InvalidModelError(f"factor {k} has non-finite entries")
            if np.any(f < 0):
                raise InvalidModelError(f"factor {k} has negative entries")
            f.setflags(write=False)
        object.__setattr__(self, "factors", mats)

    @property
    def shape(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def n_modes(self):
        return len(self.factors)


def frobenius_norm(t) -> float:
    """Square root of the sum of squared entries."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(data * data)))


def cp_reconstruct(m: FactorModel) -> Tensor:
    """Dense tensor whose entry I is sum_r prod_k factors[k][i_k, r]."""
    out = khatri_rao(list(m.factors)).sum(axis=1)
    return Tensor(out.reshape(m.shape))


def khatri_rao(matrices, skip_mode=None) -> np.ndarray:
    """Column-wise Kronecker product of the given matrices.

    Rows follow the unfolding convention: the first matrix's index is the
    slowest, the last matrix's index the fastest.  ``skip_mode`` drops one
    matrix from the product.
    """
    mats = [np.asarray(m, dtype=np.float64) for m in matrices]
    if skip_mode is not None:
        mats = [m for i, m in enumerate(mats) if i != skip_mode]
    if not mats:
        raise ValueError("khatri_rao needs at least one matrix")
    ranks = {m.shape[1] for m in mats}
    if len(ranks) != 1:
        raise ValueError(f"column-count mismatch across matrices: {sorted(ranks)}")
    rank = ranks.pop()
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, rank)
    return out


def unfold(t, mode: int) -> np.ndarray:
    """Mode-k matricization: I_mode rows, remaining modes on columns."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if not 0 <= mode < data.ndim:
        raise ValueError(f"mode {mode} out of range for a {data.ndim}-way tensor")
    return np.moveaxis(data, mode, 0).reshape(data.shape[mode], -1)


def refold(matrix, shape, mode: int) -> np.ndarray:
    """Inverse of :func:`unfold` for the given original shape."""
    shape = tuple(shape)
    if not 0 <= mode < len(shape):
        raise ValueError(f"mode {mode} out of range for shape {shape}")
    rest = shape[:mode] + shape[mode + 1 :]
    arr = np.asarray(matrix, dtype=np.float64).reshape((shape[mode],) + rest)
    return np.moveaxis(arr, 0, mode)


# ---------------------------------------------------------------------------
# Serialization: FROSTT-style .tns tensors and CSV factor matrices.
# ---------------------------------------------------------------------------

def write_tns(t: Tensor, path):
    """Write a tensor in coordinate text format (1-based, nonzeros only)."""
    data = t.data
    with open(path, "w") as fh:
        fh.write(" ".join(str(e) for e in data.shape) + "\n")
        nz = np.nonzero(data)
        for idx in zip(*nz):
            coords = " ".join(str(i + 1) for i in idx)
            fh.write(f"{coords} {data[idx]:.17g}\n")


def read_tns(path) -> Tensor:
    """Read a coordinate-format tensor; unlisted coordinates are zero."""
    shape = None
    data = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if shape is None:
                try:
                    shape = tuple(int(p) for p in parts)
                except ValueError:
                    raise ParseError("malformed extents line", path, lineno)
                if any(e <= 0 for e in shape):
                    raise ParseError("extents must be positive", path, lineno)
                data = np.zeros(shape)
                continue
            if len(parts) != len(shape) + 1:
                raise ParseError(
                    f"expected {len(shape)} coordinates and a value", path, lineno
                )
            try:
                coords = tuple(int(p) - 1 for p in parts[:-1])
                value = float(parts[-1])
            except ValueError:
                raise ParseError("malformed coordinate line", path, lineno)
            if any(c < 0 or c >= e for c, e in zip(coords, shape)):
                raise ParseError("coordinate out of range", path, lineno)
            data[coords] = value
    if shape is None:
        raise ParseError("empty tensor file", path)
    return Tensor(data)


def write_factor_csv(matrix, path):
    """Write one factor matrix as CSV with a factor_0..factor_{R-1} header."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"factor_{r}" for r in range(matrix.shape[1])])
        for row in matrix:
            writer.writerow([f"{v:.17g}" for v in row])


def read_factor_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty factor file", path)
        rank = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != rank:
                raise ParseError(f"expected {rank} columns", path, lineno)
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ParseError("malformed numeric value", path, lineno)
    return np.asarray(rows, dtype=np.float64).reshape(len(rows), rank)


def save_model(m: FactorModel, directory):
    """Write one mode_<k>.csv per factor matrix."""
    os.makedirs(directory, exist_ok=True)
    for k, f in enumerate(m.factors):
        write_factor_csv(f, os.path.join(directory, f"mode_{k}.csv"))


def load_model(directory) -> FactorModel:
    factors = []
    k = 0
    while True:
        path = os.path.join(directory, f"mode_{k}.csv")
        if not os.path.exists(path):
            break
        factors.append(read_factor_csv(path))
        k += 1
    if not factors:
        raise ParseError("no mode_<k>.csv files found", directory)
    return FactorModel(rank=factors[0].shape[1], factors=factors)
