"""Shared numerical primitives.

Everything here works in float64. Functions accept scalars or arrays and
reduce along the last axis where a reduction is involved.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def logsumexp(values, axis: int = -1):
    """log(sum(exp(values))) along ``axis`` using a max shift.

    ``-inf`` entries are allowed; an all ``-inf`` slice returns ``-inf``.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("logsumexp of an empty vector")
    vmax = np.max(v, axis=axis, keepdims=True)
    # all -inf slices would give nan from (-inf) - (-inf)
    safe = np.where(np.isfinite(vmax), vmax, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - safe), axis=axis, keepdims=True)) + safe
    out = np.squeeze(out, axis=axis)
    return out[()] if out.ndim == 0 else out


def softmax(values, axis: int = -1) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(v - np.max(v, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def _check_delta(delta: float) -> None:
    if not delta > 0:
        raise ValueError(f"huber delta must be positive, got {delta}")


def huber(x, delta: float = 1.0):
    """Huber penalty: quadratic inside ``|x| <= delta``, linear outside."""
    _check_delta(delta)
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    out = np.where(ax <= delta, 0.5 * x * x, delta * (ax - 0.5 * delta))
    return out[()] if out.ndim == 0 else out


def huber_grad(x, delta: float = 1.0):
    _check_delta(delta)
    out = np.clip(np.asarray(x, dtype=np.float64), -delta, delta)
    return out[()] if out.ndim == 0 else out


def gelu(x):
    """Exact GELU, ``x * Phi(x)`` with the erf-based normal CDF."""
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * x * (1.0 + erf(x * _INV_SQRT2))
    return out[()] if out.ndim == 0 else out


def gelu_grad(x):
    x = np.asarray(x, dtype=np.float64)
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    out = cdf + x * pdf
    return out[()] if out.ndim == 0 else out


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random source backed by the Philox counter-based generator.

    Philox is fixed here on purpose: numpy's ``default_rng`` may change its
    bit generator between releases, Philox streams do not.
    """
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.Philox(seed))
