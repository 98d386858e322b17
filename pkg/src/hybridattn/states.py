"""Synthetic prefill states and their on-disk format.

A state bank holds, per (layer, head), one or more independent prefills
(full keys/values), each with its own set of decode queries. Keys and
values are isotropic Gaussian rows scaled to unit norm; a query is a random
unit direction scaled by ``beta * sqrt(d_h)``, so every score is
``beta * cos(q, k)`` and ``beta`` alone sets how concentrated the head's
attention is.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _binio
from .attention import AttentionHeadState
from .errors import DimensionError


@dataclass(frozen=True)
class HeadState:
    layer: int
    head: int
    state: AttentionHeadState
    queries: np.ndarray  # n_queries x d_h
    prefill: int = 0


@dataclass(frozen=True)
class SyntheticConfig:
    n: int = 276
    d_h: int = 16
    layers: int = 1
    heads: int = 4
    n_queries: int = 16  # per prefill
    prefills: int = 1  # independent prefill draws per head
    beta: float | Sequence[float] = 1.0

    def betas(self) -> list[float]:
        """One concentration per head; a sequence is cycled across heads."""
        if isinstance(self.beta, (int, float)):
            vals = [float(self.beta)] * self.heads
        else:
            seq = [float(b) for b in self.beta]
            if not seq:
                raise ValueError("beta sequence is empty")
            vals = [seq[h % len(seq)] for h in range(self.heads)]
        if any(not b > 0 for b in vals):
            raise ValueError("beta must be positive")
        return vals


def _unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_states(rng: np.random.Generator, config: SyntheticConfig) -> list[HeadState]:
    """States ordered by (layer, head, prefill)."""
    if min(config.n, config.d_h, config.layers, config.heads, config.n_queries, config.prefills) < 1:
        raise ValueError(f"invalid synthetic dimensions: {config}")
    betas = config.betas()
    out = []
    for layer in range(config.layers):
        for head in range(config.heads):
            scale = betas[head] * math.sqrt(config.d_h)
            for p in range(config.prefills):
                keys = _unit_rows(rng, config.n, config.d_h)
                values = _unit_rows(rng, config.n, config.d_h)
                queries = _unit_rows(rng, config.n_queries, config.d_h) * scale
                out.append(HeadState(layer, head, AttentionHeadState(keys, values), queries, p))
    return out


STATE_MAGIC = b"KVSTATE1"
STATE_VERSION = 1


def state_file_size(layers: int, heads: int, prefills: int, n: int, d_h: int, n_queries: int) -> int:
    return 8 + 7 * 4 + layers * heads * prefills * 8 * d_h * (2 * n + n_queries)


def save_states(path, states: list[HeadState]) -> None:
    if not states:
        raise ValueError("no states to write")
    layers = max(s.layer for s in states) + 1
    heads = max(s.head for s in states) + 1
    prefills = max(s.prefill for s in states) + 1
    by_key = {(s.layer, s.head, s.prefill): s for s in states}
    first = states[0]
    n, d_h, nq = first.state.n, first.state.d_h, first.queries.shape[0]
    chunks = [STATE_MAGIC, _binio.pack_u32(STATE_VERSION, layers, heads, prefills, n, d_h, nq)]
    for layer in range(layers):
        for head in range(heads):
            for p in range(prefills):
                s = by_key.get((layer, head, p))
                if s is None:
                    raise ValueError(f"missing state for (layer={layer}, head={head}, prefill={p})")
                if (s.state.n, s.state.d_h, s.queries.shape[0]) != (n, d_h, nq):
                    raise DimensionError("all states must share N, d_h and query count")
                chunks += [_binio.pack_f64(s.state.keys), _binio.pack_f64(s.state.values), _binio.pack_f64(s.queries)]
    Path(path).write_bytes(b"".join(chunks))


def load_states(path) -> list[HeadState]:
    reader = _binio.Reader(Path(path).read_bytes(), "state")
    reader.magic(STATE_MAGIC)
    version, layers, heads, prefills, n, d_h, nq = reader.u32(7)
    _binio.check_version(version, STATE_VERSION, "state")
    if min(layers, heads, prefills, n, d_h, nq) < 1:
        raise DimensionError("state header declares a zero dimension")
    if len(reader.data) > state_file_size(layers, heads, prefills, n, d_h, nq):
        raise DimensionError("state file is longer than its header declares")
    out = []
    for layer in range(layers):
        for head in range(heads):
            for p in range(prefills):
                keys = reader.f64((n, d_h))
                values = reader.f64((n, d_h))
                queries = reader.f64((nq, d_h))
                out.append(HeadState(layer, head, AttentionHeadState(keys, values), queries, p))
    reader.expect_end()
    return out
