"""Fixed-size completion cache over the mid region and the hybrid merge.

The cache is held in max-shifted form ``(m, u_tilde, T_tilde)``:

    m[f]        = max_i log phi_k(k_i)[f]
    u_tilde[f]  = sum_i exp(log phi_k(k_i)[f] - m[f])
    T_tilde[f]  = sum_i exp(log phi_k(k_i)[f] - m[f]) * v_i

Retrieved tokens are subtracted at the same shift ``m``, which is never
updated afterwards. The natural ``(S, u)`` form is kept for oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _binio
from .attention import (
    AttentionHeadState,
    ExactTerms,
    Partition,
    exact_terms,
    topk_select,
)
from .errors import DimensionError
from .feature_map import FeatureMapParams, HeadMapPair, phi_log_forward
from .numerics import logsumexp

EPS_CLAMP = 1e-300


@dataclass(frozen=True)
class NaturalCache:
    S: np.ndarray  # d_phi x d_h
    u: np.ndarray  # d_phi


@dataclass(frozen=True)
class StableCompletionCache:
    m: np.ndarray
    u_tilde: np.ndarray
    T_tilde: np.ndarray
    mid_size: int

    @property
    def is_empty(self) -> bool:
        return self.mid_size == 0

    @property
    def d_phi(self) -> int:
        return self.u_tilde.shape[0]

    @property
    def d_h(self) -> int:
        return self.T_tilde.shape[1]

    def to_natural(self) -> NaturalCache:
        scale = np.exp(self.m)
        if self.is_empty:
            scale = np.zeros_like(self.u_tilde)
        return NaturalCache(scale[:, None] * self.T_tilde, scale * self.u_tilde)

    def equals(self, other: "StableCompletionCache") -> bool:
        return (
            self.mid_size == other.mid_size
            and np.array_equal(self.m, other.m)
            and np.array_equal(self.u_tilde, other.u_tilde)
            and np.array_equal(self.T_tilde, other.T_tilde)
        )


@dataclass(frozen=True)
class RemainderCache:
    """Cache after subtracting a retrieved set, still at the build shift ``m``."""

    m: np.ndarray
    u_tilde: np.ndarray
    T_tilde: np.ndarray
    size: int
    cancellation: np.ndarray  # u_R / u_M per feature, before clamping

    @property
    def is_empty(self) -> bool:
        return self.size == 0


@dataclass(frozen=True)
class CompletionTerms:
    log_z: float
    y: np.ndarray

    @property
    def is_empty(self) -> bool:
        return self.log_z == -math.inf

    @property
    def z(self) -> float:
        return 0.0 if self.is_empty else math.exp(self.log_z)

    @property
    def numerator(self) -> np.ndarray:
        return self.z * self.y


def empty_cache(d_phi: int, d_h: int) -> StableCompletionCache:
    return StableCompletionCache(np.full(d_phi, -np.inf), np.zeros(d_phi), np.zeros((d_phi, d_h)), 0)


def _shifted_weights(log_feats: np.ndarray, m: np.ndarray) -> np.ndarray:
    return np.exp(log_feats - m)


def build_stable_cache_from_logfeats(log_feats, values) -> StableCompletionCache:
    """Build from precomputed ``log phi_k`` rows (``n x d_phi``) and values."""
    log_feats = np.asarray(log_feats, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if log_feats.shape[0] == 0:
        return empty_cache(log_feats.shape[1], values.shape[1])
    m = log_feats.max(axis=0)
    w = _shifted_weights(log_feats, m)
    return StableCompletionCache(m, w.sum(axis=0), w.T @ values, log_feats.shape[0])


def build_stable_cache(phi_k: FeatureMapParams, state: AttentionHeadState, partition: Partition) -> StableCompletionCache:
    mid = partition.mid
    if mid.size == 0:
        return empty_cache(phi_k.d_phi, state.d_h)
    return build_stable_cache_from_logfeats(phi_log_forward(phi_k, state.keys[mid]), state.values[mid])


def build_natural_cache(phi_k: FeatureMapParams, keys, values) -> NaturalCache:
    """Direct ``S = sum phi(k) v^T``, ``u = sum phi(k)``; overflows for large log-features."""
    feats = np.exp(phi_log_forward(phi_k, np.atleast_2d(keys)))
    return NaturalCache(feats.T @ np.asarray(values, dtype=np.float64), feats.sum(axis=0))


def subtract_retrieved(cache: StableCompletionCache, phi_k: FeatureMapParams, state: AttentionHeadState,
                       partition: Partition, retrieved, eps: float = EPS_CLAMP) -> RemainderCache:
    """Remove the retrieved tokens' feature contributions from the mid cache."""
    idx = np.asarray(retrieved, dtype=np.int64).reshape(-1)
    if idx.size and not partition.in_mid(idx).all():
        raise ValueError("retrieved indices must lie in the mid region")
    if np.unique(idx).size != idx.size:
        raise ValueError("retrieved indices contain duplicates")
    remaining = cache.mid_size - idx.size
    if idx.size == 0:
        u_r, t_r = cache.u_tilde.copy(), cache.T_tilde.copy()
    else:
        w = _shifted_weights(phi_log_forward(phi_k, state.keys[idx]), cache.m)
        u_r = cache.u_tilde - w.sum(axis=0)
        t_r = cache.T_tilde - w.T @ state.values[idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(cache.u_tilde > 0, u_r / cache.u_tilde, 0.0)
    u_r = np.maximum(u_r, eps)
    return RemainderCache(cache.m, u_r, t_r, remaining, ratio)


def remainder_from_cache(cache: StableCompletionCache) -> RemainderCache:
    """Treat a whole cache as the remainder (nothing retrieved)."""
    return RemainderCache(cache.m, np.maximum(cache.u_tilde, EPS_CLAMP), cache.T_tilde,
                          cache.mid_size, np.ones_like(cache.u_tilde))


def completion_terms(phi_q: FeatureMapParams, q, remainder: RemainderCache) -> CompletionTerms:
    """Estimated remainder mass (log) and normalized completion output.

    With ``a_f = log phi_q(q)[f] + m[f] + log u_R[f]``, ``log Z = LSE(a)`` and
    ``y = sum_f softmax(a)_f * T_R[f] / u_R[f]``.
    """
    d_h = remainder.T_tilde.shape[1]
    if remainder.is_empty:
        return CompletionTerms(-math.inf, np.zeros(d_h))
    lq = phi_log_forward(phi_q, q)
    base = lq + remainder.m
    a = base + np.log(remainder.u_tilde)
    log_z = float(logsumexp(a))
    # softmax(a)_f / u_R[f] == exp(base_f - log_z): avoids dividing by clamped entries
    coef = np.exp(base - log_z)
    return CompletionTerms(log_z, coef @ remainder.T_tilde)


def feature_means(remainder: RemainderCache) -> np.ndarray:
    """Per-feature conditional value means ``T_R[f] / u_R[f]``."""
    return remainder.T_tilde / remainder.u_tilde[:, None]


def natural_completion(phi_q: FeatureMapParams, q, natural: NaturalCache) -> tuple[float, np.ndarray]:
    """Unshifted ``Z = phi_q(q)^T u`` and ``N = phi_q(q)^T S``, for oracles."""
    fq = np.exp(phi_log_forward(phi_q, q))
    return float(fq @ natural.u), fq @ natural.S


def hybrid_merge(exact: ExactTerms, completion: CompletionTerms) -> np.ndarray:
    """``(N_E + N_R) / (Z_E + Z_R)`` evaluated at the shared shift ``max(log Z_E, log Z_R)``."""
    log_ze, log_zr = exact.log_z, completion.log_z
    if log_ze == -math.inf and log_zr == -math.inf:
        raise ValueError("cannot merge: both exact and completion masses are zero")
    c = max(log_ze, log_zr)
    we = math.exp(log_ze - c) if log_ze > -math.inf else 0.0
    wr = math.exp(log_zr - c) if log_zr > -math.inf else 0.0
    ye = exact.y if we > 0 else 0.0
    yr = completion.y if wr > 0 else 0.0
    return (we * ye + wr * yr) / (we + wr)


def mass_share(exact: ExactTerms, completion: CompletionTerms) -> float:
    """Completion share of the hybrid normalizer, ``Z_R / (Z_E + Z_R)``."""
    if completion.is_empty:
        return 0.0
    if exact.is_empty:
        return 1.0
    d = exact.log_z - completion.log_z
    # 1 / (1 + exp(d)) without overflow
    return float(np.exp(-np.logaddexp(0.0, d)))


@dataclass(frozen=True)
class HybridResult:
    y: np.ndarray
    rho_z: float
    retrieved: np.ndarray
    exact: ExactTerms
    completion: CompletionTerms


def hybrid_decode(q, state: AttentionHeadState, partition: Partition, k: int,
                  pair: HeadMapPair, cache: StableCompletionCache) -> HybridResult:
    """Anchors + Top-K exact, feature-map completion over the unretrieved mid."""
    retrieved = topk_select(q, state, partition, k)
    loaded = np.concatenate([partition.anchors, retrieved])
    exact = exact_terms(q, state, loaded) if loaded.size else ExactTerms.empty(state.d_h)
    remainder = subtract_retrieved(cache, pair.phi_k, state, partition, retrieved)
    completion = completion_terms(pair.phi_q, q, remainder)
    y = hybrid_merge(exact, completion)
    return HybridResult(y, mass_share(exact, completion), retrieved, exact, completion)


# --- cache file format -------------------------------------------------------

CACHE_MAGIC = b"PHICACH1"
CACHE_VERSION = 1
_HEADER_BYTES = 8 + 6 * 4


def cache_file_size(layers: int, kv_heads: int, d_phi: int, d_h: int) -> int:
    return _HEADER_BYTES + layers * kv_heads * 8 * (2 * d_phi + d_phi * d_h)


def cache_serialize(path, caches: dict[tuple[int, int], StableCompletionCache]) -> None:
    """Write caches keyed by ``(layer, kv_head)``; all must share dims and mid size."""
    if not caches:
        raise ValueError("no caches to write")
    layers = max(l for l, _ in caches) + 1
    heads = max(h for _, h in caches) + 1
    first = caches[(0, 0)]
    dims = (first.d_phi, first.d_h, first.mid_size)
    chunks = [CACHE_MAGIC, _binio.pack_u32(CACHE_VERSION, layers, heads, *dims)]
    for layer in range(layers):
        for head in range(heads):
            c = caches.get((layer, head))
            if c is None:
                raise ValueError(f"missing cache for (layer={layer}, kv_head={head})")
            if (c.d_phi, c.d_h, c.mid_size) != dims:
                raise DimensionError(f"cache ({layer}, {head}) disagrees with header dims")
            chunks += [_binio.pack_f64(c.m), _binio.pack_f64(c.u_tilde), _binio.pack_f64(c.T_tilde)]
    Path(path).write_bytes(b"".join(chunks))


def cache_deserialize(path) -> dict[tuple[int, int], StableCompletionCache]:
    reader = _binio.Reader(Path(path).read_bytes(), "cache")
    reader.magic(CACHE_MAGIC)
    version, layers, heads, d_phi, d_h, mid_size = reader.u32(6)
    _binio.check_version(version, CACHE_VERSION, "cache")
    if min(layers, heads, d_phi, d_h) < 1:
        raise DimensionError("cache header declares a zero dimension")
    declared = cache_file_size(layers, heads, d_phi, d_h)
    if len(reader.data) > declared:
        raise DimensionError(f"cache file has {len(reader.data)} bytes, header declares {declared}")
    out = {}
    for layer in range(layers):
        for head in range(heads):
            m = reader.f64((d_phi,))
            u = reader.f64((d_phi,))
            t = reader.f64((d_phi, d_h))
            if np.any(u > mid_size * (1 + 1e-12)):
                raise DimensionError("shifted mass exceeds declared mid size")
            out[(layer, head)] = StableCompletionCache(m, u, t, mid_size)
    reader.expect_end()
    return out
