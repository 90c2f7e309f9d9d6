"""Top-P% selection of the largest global-weight changes and its server-side merge."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass

import numpy as np


@dataclass(eq=False)
class SparseUpdate:
    indices: np.ndarray
    values: np.ndarray
    round: int = 0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.uint32)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.indices.shape != self.values.shape:
            raise ValueError("indices and values must have equal length")
        if self.indices.size > 1 and np.any(np.diff(self.indices.astype(np.int64)) <= 0):
            raise ValueError("indices must be strictly increasing")

    def __len__(self) -> int:
        return self.indices.size

    def __eq__(self, other):
        return (isinstance(other, SparseUpdate) and self.round == other.round
                and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values.view(np.uint32), other.values.view(np.uint32)))


def selection_size(n: int, top_p: float) -> int:
    if not 0 < top_p <= 100:
        raise ValueError(f"top_p must lie in (0, 100], got {top_p}")
    # exact rational arithmetic: P=75 on 1120 weights must give 840, not 841
    return min(n, math.ceil(Fraction(repr(float(top_p))) * n / 100))


def select_top_p(g_old, g_new, top_p: float, round: int = 0) -> SparseUpdate:
    """Keep the ceil(P% of n) coordinates with the largest |g_new - g_old|.

    Ties in |change| go to the lower index; the result is sorted by index.
    """
    g_old = np.asarray(g_old)
    g_new = np.asarray(g_new)
    if g_old.shape != g_new.shape:
        raise ValueError("g_old and g_new differ in length")
    m = selection_size(g_old.size, top_p)
    change = np.abs(g_new.astype(np.float64) - g_old.astype(np.float64))
    # stable sort on -|change| keeps lower indices first among equal changes
    order = np.argsort(-change, kind="stable")[:m]
    idx = np.sort(order)
    return SparseUpdate(idx, g_new[idx], round)


def apply_sparse_update(g, upd: SparseUpdate, rate: float) -> np.ndarray:
    """Move communicated coordinates toward the sent values; the rest stay put."""
    g = np.asarray(g)
    idx = upd.indices.astype(np.int64)
    if idx.size and (idx[-1] >= g.size):
        raise IndexError(f"update index {int(idx[-1])} out of range for {g.size} weights")
    out = g.copy()
    vals = upd.values.astype(g.dtype)
    out[idx] = g[idx] + rate * (vals - g[idx])
    return out
