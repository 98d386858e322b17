"""Exact softmax attention, anchor/mid partitioning and Top-K selection.

``full_attention`` is the oracle every approximation is measured against.
Exact partial sums are kept in a max-shifted form (``ExactTerms``) so the
hybrid merge can combine them with completion terms without overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AttentionHeadState:
    """Prefill keys and values of one head, both ``N x d_h``."""

    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if keys.ndim != 2 or values.ndim != 2:
            raise ValueError("keys and values must be 2-D")
        if keys.shape[0] < 1 or keys.shape[0] != values.shape[0]:
            raise ValueError(f"keys {keys.shape} and values {values.shape} need the same N >= 1")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.keys.shape[0]

    @property
    def d_h(self) -> int:
        return self.keys.shape[1]


@dataclass(frozen=True)
class Partition:
    n: int
    n_sink: int
    n_tail: int

    @property
    def sink(self) -> np.ndarray:
        return np.arange(self.n_sink)

    @property
    def tail(self) -> np.ndarray:
        return np.arange(self.n - self.n_tail, self.n)

    @property
    def anchors(self) -> np.ndarray:
        return np.concatenate([self.sink, self.tail]).astype(np.int64)

    @property
    def mid(self) -> np.ndarray:
        return np.arange(self.n_sink, self.n - self.n_tail)

    @property
    def mid_size(self) -> int:
        return self.n - self.n_sink - self.n_tail

    def in_mid(self, indices) -> np.ndarray:
        idx = np.asarray(indices)
        return (idx >= self.n_sink) & (idx < self.n - self.n_tail)


def make_partition(n: int, n_sink: int, n_tail: int) -> Partition:
    if n < 1 or n_sink < 0 or n_tail < 0:
        raise ValueError(f"invalid partition sizes N={n}, n_sink={n_sink}, n_tail={n_tail}")
    if n_sink + n_tail > n:
        raise ValueError(f"n_sink + n_tail = {n_sink + n_tail} exceeds N = {n}")
    return Partition(n, n_sink, n_tail)


@dataclass(frozen=True)
class ExactTerms:
    """Unnormalized partial sums over a loaded set, stored at a max shift.

    ``Z_E = exp(shift) * z_shifted`` and ``N_E = exp(shift) * n_shifted``.
    An empty set is represented with ``shift = -inf`` and zero sums.
    """

    shift: float
    z_shifted: float
    n_shifted: np.ndarray

    @classmethod
    def empty(cls, d_h: int) -> "ExactTerms":
        return cls(-math.inf, 0.0, np.zeros(d_h))

    @property
    def is_empty(self) -> bool:
        return self.z_shifted == 0.0

    @property
    def log_z(self) -> float:
        if self.is_empty:
            return -math.inf
        return self.shift + math.log(self.z_shifted)

    @property
    def z(self) -> float:
        return 0.0 if self.is_empty else math.exp(self.shift) * self.z_shifted

    @property
    def numerator(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros_like(self.n_shifted)
        return math.exp(self.shift) * self.n_shifted

    @property
    def y(self) -> np.ndarray:
        """The subset-normalized output ``N_E / Z_E``."""
        if self.is_empty:
            raise ZeroDivisionError("normalized output of an empty exact set")
        return self.n_shifted / self.z_shifted


def _as_indices(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for N={n}: {idx.min()}..{idx.max()}")
    return idx


def scores(q, state: AttentionHeadState, indices=None) -> np.ndarray:
    """``<q, k_i> / sqrt(d_h)`` for each requested index, in the given order."""
    q = np.asarray(q, dtype=np.float64)
    if indices is None:
        keys = state.keys
    else:
        keys = state.keys[_as_indices(indices, state.n)]
    return keys @ q / math.sqrt(state.d_h)


def exact_terms_from_scores(s, values) -> ExactTerms:
    """Accumulate ``sum exp(s_i)`` and ``sum exp(s_i) v_i`` at the max score."""
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0:
        raise ValueError("exact terms need a non-empty index set")
    shift = float(np.max(s))
    w = np.exp(s - shift)
    return ExactTerms(shift, float(np.sum(w)), w @ np.asarray(values, dtype=np.float64))


def exact_terms(q, state: AttentionHeadState, indices) -> ExactTerms:
    idx = _as_indices(indices, state.n)
    if idx.size == 0:
        raise ValueError("exact terms need a non-empty index set")
    return exact_terms_from_scores(scores(q, state, idx), state.values[idx])


def full_attention(q, state: AttentionHeadState) -> np.ndarray:
    return exact_terms_from_scores(scores(q, state), state.values).y


def selection_only_output(exact: ExactTerms) -> np.ndarray:
    if exact.is_empty:
        raise ValueError("selection-only output needs Z_E > 0")
    return exact.y


def topk_select(q, state: AttentionHeadState, partition: Partition, k: int) -> np.ndarray:
    """Indices of the ``k`` highest-scoring mid tokens.

    Ties go to the smaller index. The result is ordered by descending score.
    """
    mid = partition.mid
    if not 0 <= k <= mid.size:
        raise ValueError(f"K={k} outside [0, |M|={mid.size}]")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    s = scores(q, state, mid)
    # stable sort on -s keeps ascending index order among equal scores
    order = np.argsort(-s, kind="stable")[:k]
    return mid[order].astype(np.int64)


@dataclass(frozen=True)
class SubsetBias:
    y_full: np.ndarray
    y_sel: np.ndarray
    z_e: float
    z_r: float
    y_r: np.ndarray | None
    gap: np.ndarray
    predicted_gap: np.ndarray

    @property
    def residual(self) -> float:
        return float(np.max(np.abs(self.gap - self.predicted_gap)))


def subset_bias_decomposition(q, state: AttentionHeadState, indices) -> SubsetBias:
    """Split the selection-only error into remainder mass and remainder mean.

    ``y_full - y_sel == Z_R / (Z_E + Z_R) * (y_R - y_sel)``; both sides are
    returned so callers can check the residual.
    """
    idx = _as_indices(indices, state.n)
    if idx.size == 0:
        raise ValueError("subset must be non-empty")
    mask = np.zeros(state.n, dtype=bool)
    mask[idx] = True
    s = scores(q, state)
    shift = float(np.max(s))
    w = np.exp(s - shift)
    ze, zr = float(np.sum(w[mask])), float(np.sum(w[~mask]))
    ne, nr = w[mask] @ state.values[mask], w[~mask] @ state.values[~mask]
    y_full = (ne + nr) / (ze + zr)
    y_sel = ne / ze
    scale = math.exp(shift)
    if not (~mask).any():
        zero = np.zeros(state.d_h)
        return SubsetBias(y_full, y_sel, ze * scale, 0.0, None, y_full - y_sel, zero)
    y_r = nr / zr
    predicted = zr / (ze + zr) * (y_r - y_sel)
    return SubsetBias(y_full, y_sel, ze * scale, zr * scale, y_r, y_full - y_sel, predicted)
