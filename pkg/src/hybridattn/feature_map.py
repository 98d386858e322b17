"""Head-wise positive feature maps (one-block ReZero MLP).

A map sends ``x`` (``d_h``) to log-features ``g2`` (``d_phi``); the positive
feature vector is ``exp(g2)`` but it is never materialized. Scores stay in
the log domain:

    g0 = W_s x + b_s
    g1 = g0 + alpha * (W_2 gelu(W_1 g0 + b_1) + b_2)
    g2 = W_o g1 + b_o
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _binio
from .errors import DimensionError
from .numerics import gelu, gelu_grad, logsumexp

PARAM_ORDER = ("W_s", "b_s", "W_1", "b_1", "W_2", "b_2", "alpha", "W_o", "b_o")


@dataclass
class FeatureMapParams:
    W_s: np.ndarray
    b_s: np.ndarray
    W_1: np.ndarray
    b_1: np.ndarray
    W_2: np.ndarray
    b_2: np.ndarray
    alpha: np.ndarray  # 0-d array so it can be updated in place like the others
    W_o: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        for name in PARAM_ORDER:
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64))
        d_emb, d_h = self.W_s.shape
        d_phi = self.W_o.shape[0]
        expected = {
            "b_s": (d_emb,),
            "W_1": (d_emb, d_emb),
            "b_1": (d_emb,),
            "W_2": (d_emb, d_emb),
            "b_2": (d_emb,),
            "alpha": (),
            "W_o": (d_phi, d_emb),
            "b_o": (d_phi,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if min(d_h, d_emb, d_phi) < 1:
            raise DimensionError("feature map dimensions must be positive")

    @property
    def d_h(self) -> int:
        return self.W_s.shape[1]

    @property
    def d_emb(self) -> int:
        return self.W_s.shape[0]

    @property
    def d_phi(self) -> int:
        return self.W_o.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in PARAM_ORDER]

    def copy(self) -> "FeatureMapParams":
        return FeatureMapParams(*(a.copy() for a in self.arrays()))

    def zeros_like(self) -> "FeatureMapParams":
        return FeatureMapParams(*(np.zeros_like(a) for a in self.arrays()))

    def equals(self, other: "FeatureMapParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    @staticmethod
    def param_count(d_h: int, d_emb: int, d_phi: int) -> int:
        return d_emb * d_h + d_emb + 2 * (d_emb * d_emb + d_emb) + 1 + d_phi * d_emb + d_phi


@dataclass
class HeadMapPair:
    """Asymmetric maps for one (layer, query head) and its KV head."""

    phi_q: FeatureMapParams
    phi_k: FeatureMapParams
    layer: int = 0
    q_head: int = 0
    kv_head: int = 0

    def __post_init__(self):
        if self.phi_q.d_h != self.phi_k.d_h or self.phi_q.d_phi != self.phi_k.d_phi:
            raise DimensionError("phi_q and phi_k must share d_h and d_phi")
        if self.phi_q is self.phi_k:
            raise ValueError("phi_q and phi_k must be distinct parameter sets")

    def copy(self) -> "HeadMapPair":
        return HeadMapPair(self.phi_q.copy(), self.phi_k.copy(), self.layer, self.q_head, self.kv_head)


@dataclass
class ForwardCache:
    x: np.ndarray
    g0: np.ndarray
    h: np.ndarray
    a: np.ndarray
    delta: np.ndarray
    g1: np.ndarray
    g2: np.ndarray


def phi_forward(params: FeatureMapParams, x) -> ForwardCache:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.d_h:
        raise DimensionError(f"input width {x.shape[-1]} != d_h {params.d_h}")
    g0 = x @ params.W_s.T + params.b_s
    h = g0 @ params.W_1.T + params.b_1
    a = gelu(h)
    delta = a @ params.W_2.T + params.b_2
    g1 = g0 + params.alpha * delta
    g2 = g1 @ params.W_o.T + params.b_o
    return ForwardCache(x, g0, h, a, delta, g1, g2)


def phi_log_forward(params: FeatureMapParams, x) -> np.ndarray:
    """Log-features ``log phi(x)`` for one vector or a batch of rows."""
    return phi_forward(params, x).g2


def phi_backward(params: FeatureMapParams, x, upstream, cache: ForwardCache | None = None):
    """Reverse-mode gradients of ``sum(upstream * g2)``.

    Returns ``(grads, dx)`` where ``grads`` is a ``FeatureMapParams`` holding
    the parameter gradients summed over the batch.
    """
    if cache is None:
        cache = phi_forward(params, x)
    x2 = np.atleast_2d(cache.x)
    G2 = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    g0, h, a = np.atleast_2d(cache.g0), np.atleast_2d(cache.h), np.atleast_2d(cache.a)
    delta, g1 = np.atleast_2d(cache.delta), np.atleast_2d(cache.g1)

    dW_o = G2.T @ g1
    db_o = G2.sum(axis=0)
    G1 = G2 @ params.W_o
    dalpha = np.sum(G1 * delta)
    Gd = params.alpha * G1
    dW_2 = Gd.T @ a
    db_2 = Gd.sum(axis=0)
    Gh = (Gd @ params.W_2) * gelu_grad(h)
    dW_1 = Gh.T @ g0
    db_1 = Gh.sum(axis=0)
    G0 = G1 + Gh @ params.W_1
    dW_s = G0.T @ x2
    db_s = G0.sum(axis=0)
    dx = G0 @ params.W_s
    if np.ndim(cache.x) == 1:
        dx = dx[0]
    grads = FeatureMapParams(dW_s, db_s, dW_1, db_1, dW_2, db_2, dalpha, dW_o, db_o)
    return grads, dx


def init_params(rng: np.random.Generator, d_h: int, d_emb: int | None = None, d_phi: int | None = None) -> FeatureMapParams:
    """Gaussian weights with std ``1/sqrt(fan_in)``, zero biases, ReZero gate at 0."""
    d_emb = 2 * d_h if d_emb is None else d_emb
    d_phi = d_h if d_phi is None else d_phi
    if min(d_h, d_emb, d_phi) < 1:
        raise ValueError("dimensions must be positive")
    return FeatureMapParams(
        W_s=rng.standard_normal((d_emb, d_h)) / math.sqrt(d_h),
        b_s=np.zeros(d_emb),
        W_1=rng.standard_normal((d_emb, d_emb)) / math.sqrt(d_emb),
        b_1=np.zeros(d_emb),
        W_2=rng.standard_normal((d_emb, d_emb)) / math.sqrt(d_emb),
        b_2=np.zeros(d_emb),
        alpha=0.0,
        W_o=rng.standard_normal((d_phi, d_emb)) / math.sqrt(d_emb),
        b_o=np.zeros(d_phi),
    )


def init_pair(rng: np.random.Generator, d_h: int, d_emb: int | None = None, d_phi: int | None = None,
              layer: int = 0, q_head: int = 0, kv_head: int | None = None) -> HeadMapPair:
    phi_q = init_params(rng, d_h, d_emb, d_phi)
    phi_k = init_params(rng, d_h, d_emb, d_phi)
    return HeadMapPair(phi_q, phi_k, layer, q_head, q_head if kv_head is None else kv_head)


def surrogate_log_scores(pair: HeadMapPair, q, keys, cache_q=None, cache_k=None) -> np.ndarray:
    """``log <phi_q(q), phi_k(k_j)>`` for every row of ``keys``."""
    lq = phi_log_forward(pair.phi_q, q) if cache_q is None else cache_q.g2
    lk = phi_log_forward(pair.phi_k, keys) if cache_k is None else cache_k.g2
    return logsumexp(lk + lq, axis=-1)


def surrogate_log_score(pair: HeadMapPair, q, k) -> float:
    return float(surrogate_log_scores(pair, q, np.asarray(k, dtype=np.float64)[None, :])[0])


# --- checkpoint format -------------------------------------------------------

CHECKPOINT_MAGIC = b"PHIMAP01"
CHECKPOINT_VERSION = 1
_HEADER_BYTES = 8 + 6 * 4


def checkpoint_size(layers: int, heads: int, d_h: int, d_emb: int, d_phi: int) -> int:
    return _HEADER_BYTES + layers * heads * 2 * 8 * FeatureMapParams.param_count(d_h, d_emb, d_phi)


def _grid_dims(pairs: dict) -> tuple[int, int]:
    if not pairs:
        raise ValueError("no maps to save")
    layers = max(l for l, _ in pairs) + 1
    heads = max(h for _, h in pairs) + 1
    missing = [(l, h) for l in range(layers) for h in range(heads) if (l, h) not in pairs]
    if missing:
        raise ValueError(f"checkpoint needs a full (layer, head) grid; missing {missing[:4]}")
    return layers, heads


def save_checkpoint(path, pairs: dict[tuple[int, int], HeadMapPair]) -> None:
    """Write maps keyed by ``(layer, head)``; ``phi_q`` then ``phi_k`` per head."""
    layers, heads = _grid_dims(pairs)
    first = pairs[(0, 0)].phi_q
    dims = (first.d_h, first.d_emb, first.d_phi)
    chunks = [CHECKPOINT_MAGIC, _binio.pack_u32(CHECKPOINT_VERSION, layers, heads, *dims)]
    for layer in range(layers):
        for head in range(heads):
            pair = pairs[(layer, head)]
            for params in (pair.phi_q, pair.phi_k):
                if (params.d_h, params.d_emb, params.d_phi) != dims:
                    raise DimensionError(f"map ({layer}, {head}) has inconsistent dimensions")
                chunks.extend(_binio.pack_f64(a) for a in params.arrays())
    Path(path).write_bytes(b"".join(chunks))


def _read_params(reader: _binio.Reader, d_h: int, d_emb: int, d_phi: int) -> FeatureMapParams:
    shapes = {
        "W_s": (d_emb, d_h), "b_s": (d_emb,), "W_1": (d_emb, d_emb), "b_1": (d_emb,),
        "W_2": (d_emb, d_emb), "b_2": (d_emb,), "alpha": (), "W_o": (d_phi, d_emb), "b_o": (d_phi,),
    }
    return FeatureMapParams(**{name: reader.f64(shapes[name]) for name in PARAM_ORDER})


def load_checkpoint(path) -> dict[tuple[int, int], HeadMapPair]:
    reader = _binio.Reader(Path(path).read_bytes(), "checkpoint")
    reader.magic(CHECKPOINT_MAGIC)
    version, layers, heads, d_h, d_emb, d_phi = reader.u32(6)
    _binio.check_version(version, CHECKPOINT_VERSION, "checkpoint")
    if min(layers, heads, d_h, d_emb, d_phi) < 1:
        raise DimensionError("checkpoint header declares a zero dimension")
    declared = checkpoint_size(layers, heads, d_h, d_emb, d_phi)
    if len(reader.data) > declared:
        raise DimensionError(f"checkpoint has {len(reader.data)} bytes, header declares {declared}")
    pairs = {}
    for layer in range(layers):
        for head in range(heads):
            phi_q = _read_params(reader, d_h, d_emb, d_phi)
            phi_k = _read_params(reader, d_h, d_emb, d_phi)
            pairs[(layer, head)] = HeadMapPair(phi_q, phi_k, layer, head, head)
    reader.expect_end()
    return pairs


__all__ = [
    "FeatureMapParams", "HeadMapPair", "ForwardCache", "phi_forward", "phi_log_forward",
    "phi_backward", "init_params", "init_pair", "surrogate_log_score", "surrogate_log_scores",
    "save_checkpoint", "load_checkpoint", "checkpoint_size", "PARAM_ORDER",
]
