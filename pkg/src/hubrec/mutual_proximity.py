"""Mutual Proximity rescaling of distance matrices.

The exact empirical form counts, for every pair (x, t), the objects j
that are strictly farther from x than t is AND strictly farther from t
than x is; the count over the catalogue size becomes a proximity and
1 - proximity the secondary distance. A tanh-based surrogate provides a
differentiable stand-in for the counting step.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class DistanceKind(str, Enum):
    SKL = "skl"
    MP = "mp"


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray  # (n, n) symmetric, zero diagonal, nonnegative
    ids: tuple[str, ...]
    kind: DistanceKind

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).copy()
        ids = tuple(self.ids)
        n = len(ids)
        if values.shape != (n, n):
            raise ValueError("matrix shape does not match id count")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("distances must be finite and nonnegative")
        if np.any(np.diag(values) != 0.0):
            raise ValueError("diagonal must be zero")
        if not np.array_equal(values, values.T):
            raise ValueError("matrix must be symmetric")
        if self.kind == DistanceKind.MP and np.any(values > 1.0):
            raise ValueError("MP distances must lie in [0, 1]")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return len(self.ids)

    def index_of(self, clip_id: str) -> int:
        try:
            return self.ids.index(clip_id)
        except ValueError:
            raise KeyError(f"unknown id {clip_id!r}") from None


def mp_pair_counts(d: np.ndarray) -> np.ndarray:
    """Pair counts |{j: d_xj > d_xt} & {j: d_tj > d_tx}| for all pairs, row-blocked."""
    n = d.shape[0]
    counts = np.zeros((n, n), dtype=np.int64)
    for i in range(n - 1):
        rest = slice(i + 1, n)
        pair = d[rest, i][:, None]                   # d_tx for t > i
        both = (d[i, :][None, :] > pair) & (d[rest, :] > pair)
        counts[i, rest] = both.sum(axis=1)
    return counts + counts.T


def mp_rescale_values(values: np.ndarray) -> np.ndarray:
    """Array-level rescale shared by the public API and hot loops."""
    n = values.shape[0]
    out = 1.0 - mp_pair_counts(values) / n
    np.fill_diagonal(out, 0.0)
    return out


def mp_rescale(d: DistanceMatrix) -> DistanceMatrix:
    """Exact empirical Mutual Proximity; entries become 1 - count/n."""
    if d.kind != DistanceKind.SKL:
        raise ValueError("mp_rescale expects a primary (SKL) distance matrix")
    if d.n < 3:
        raise ValueError("Mutual Proximity needs at least 3 objects")
    return DistanceMatrix(mp_rescale_values(d.values), d.ids, DistanceKind.MP)


def augment_matrix(values: np.ndarray, new_row: np.ndarray) -> np.ndarray:
    """Append one object to a square distance matrix (zero self-distance)."""
    n = values.shape[0]
    out = np.zeros((n + 1, n + 1))
    out[:n, :n] = values
    out[n, :n] = new_row
    out[:n, n] = new_row
    return out


def mp_rescale_incremental(d: DistanceMatrix, new_row: np.ndarray,
                           new_id: str = "__new__") -> tuple[np.ndarray, DistanceMatrix]:
    """MP after adding one object: (the new object's MP row, full (n+1) MP matrix).

    Equivalent to rescaling the explicitly augmented matrix; the
    denominator becomes n + 1.
    """
    new_row = np.asarray(new_row, dtype=np.float64)
    if new_row.shape != (d.n,):
        raise ValueError(f"new_row must have length {d.n}")
    if np.any(new_row < 0) or not np.all(np.isfinite(new_row)):
        raise ValueError("new_row entries must be finite and nonnegative")
    aug = DistanceMatrix(augment_matrix(d.values, new_row), d.ids + (new_id,), DistanceKind.SKL)
    rescaled = mp_rescale(aug)
    return rescaled.values[d.n].copy(), rescaled


def bt(diff):
    """Differentiable bigger-than: max(tanh(diff), 0)."""
    return np.maximum(np.tanh(diff), 0.0)


def bt_grad(diff):
    """Derivative of bt; the clamped branch contributes zero."""
    diff = np.asarray(diff, dtype=np.float64)
    # sech^2 via exp(-2|diff|) to avoid cosh overflow for large arguments.
    decay = np.exp(-2.0 * np.abs(diff))
    sech2 = 4.0 * decay / (1.0 + decay) ** 2
    return np.where(diff > 0.0, sech2, 0.0)


def _check_surrogate_args(d_row_x, d_row_t, idx_x, idx_t):
    d_row_x = np.asarray(d_row_x, dtype=np.float64)
    d_row_t = np.asarray(d_row_t, dtype=np.float64)
    n = d_row_x.size
    if d_row_t.size != n:
        raise ValueError("rows must have equal length")
    if not (0 <= idx_x < n and 0 <= idx_t < n):
        raise IndexError("row index out of range")
    if idx_x == idx_t:
        raise ValueError("idx_x and idx_t must differ")
    return d_row_x, d_row_t, n


def mp_surrogate(d_row_x, d_row_t, idx_x: int, idx_t: int) -> float:
    """Smooth approximation of the MP distance between objects x and t.

    The pair distance is read from row x at idx_t and used for both
    counting sets, matching the symmetric exact form.
    """
    d_row_x, d_row_t, n = _check_surrogate_args(d_row_x, d_row_t, idx_x, idx_t)
    pair = d_row_x[idx_t]
    return float(1.0 - np.sum(bt(d_row_x - pair) * bt(d_row_t - pair)) / n)


def mp_surrogate_grad(d_row_x, d_row_t, idx_x: int, idx_t: int) -> np.ndarray:
    """Gradient of mp_surrogate with respect to the entries of row x.

    The idx_t coordinate carries the pair-distance contribution; shifting
    it up pushes every smooth comparison toward the clamped branch, so
    that coordinate's gradient is nonnegative while all others are
    nonpositive.
    """
    d_row_x, d_row_t, n = _check_surrogate_args(d_row_x, d_row_t, idx_x, idx_t)
    pair = d_row_x[idx_t]
    a = d_row_x - pair
    b = d_row_t - pair
    grad = -bt_grad(a) * bt(b) / n
    # The i = idx_t summand is identically zero in value and derivative;
    # that coordinate instead collects the pair-distance chain terms.
    mask = np.arange(n) != idx_t
    grad[idx_t] = np.sum(bt_grad(a[mask]) * bt(b[mask]) + bt(a[mask]) * bt_grad(b[mask])) / n
    return grad
