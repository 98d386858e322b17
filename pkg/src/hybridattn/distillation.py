"""Distilling feature maps onto teacher attention scores.

The student logit for key ``j`` is ``log <phi_q(q), phi_k(k_j)>``. The
objective mixes a temperature-scaled KL term with three Huber penalties on
logits shifted by the teacher maximum: a symmetric one in the top band, a
one-sided false-positive one in the far region, and a one-sided penalty on
log-partition overestimation.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .attention import Partition, make_partition
from .errors import DimensionError, ScoreMismatchError
from .feature_map import FeatureMapParams, HeadMapPair, phi_backward, phi_forward
from .numerics import huber, huber_grad, logsumexp, softmax
from .states import HeadState, SyntheticConfig, generate_states

log = logging.getLogger(__name__)

SCORE_TOL = 1e-9


@dataclass(frozen=True)
class TeacherTrace:
    layer: int
    q_head: int
    kv_head: int
    n: int  # prefill length the support set was cut from
    q: np.ndarray
    keys: np.ndarray  # support rows only
    values: np.ndarray
    scores: np.ndarray

    @property
    def d_h(self) -> int:
        return self.q.shape[0]

    def score_error(self) -> float:
        recomputed = self.keys @ self.q / math.sqrt(self.d_h)
        return float(np.max(np.abs(recomputed - self.scores))) if self.scores.size else 0.0


def traces_from_states(states: list[HeadState], partition: Partition) -> list[TeacherTrace]:
    """One trace per query, restricted to the mid region of the prefill."""
    mid = partition.mid
    out = []
    for hs in states:
        keys, values = hs.state.keys[mid], hs.state.values[mid]
        for q in hs.queries:
            s = keys @ q / math.sqrt(hs.state.d_h)
            out.append(TeacherTrace(hs.layer, hs.head, hs.head, hs.state.n, q.copy(), keys, values, s))
    return out


def generate_synthetic_traces(rng: np.random.Generator, config: SyntheticConfig,
                              n_sink: int = 4, n_tail: int = 16) -> list[TeacherTrace]:
    if config.n <= n_sink + n_tail:
        raise ValueError(f"N={config.n} leaves no mid region after {n_sink}+{n_tail} anchors")
    return traces_from_states(generate_states(rng, config), make_partition(config.n, n_sink, n_tail))


# --- loss --------------------------------------------------------------------


@dataclass(frozen=True)
class LossConfig:
    tau: float = 1.0
    lambda_kl: float = 0.99
    lambda_top: float = 1.0
    lambda_fp: float = 2.0
    lambda_z: float = 4.0
    band: float = 8.0  # top-band width (Delta)
    knee: float = 1.0  # Huber knee (delta)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not self.knee > 0:
            raise ValueError(f"Huber knee must be positive, got {self.knee}")
        if self.band < 0:
            raise ValueError("top-band width must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    kl: float
    top: float
    fp: float
    z: float


def shifted_logits(s, s_hat):
    """Shift both logit vectors by the teacher maximum ``b``; returns ``(r, r_hat, b)``."""
    s = np.asarray(s, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s.shape != s_hat.shape:
        raise ValueError(f"teacher {s.shape} and student {s_hat.shape} logits differ in length")
    if s.size == 0:
        raise ValueError("empty logit vectors")
    b = float(np.max(s))
    return s - b, s_hat - b, b


def loss_and_logit_grad(s, s_hat, config: LossConfig) -> tuple[LossBreakdown, np.ndarray]:
    """Loss components and ``dL/d s_hat``."""
    r, r_hat, _ = shifted_logits(s, s_hat)
    tau, knee = config.tau, config.knee

    log_p = r / tau - logsumexp(r / tau)
    log_p_hat = r_hat / tau - logsumexp(r_hat / tau)
    p, p_hat = np.exp(log_p), np.exp(log_p_hat)
    l_kl = tau * tau * float(np.sum(p * (log_p - log_p_hat)))
    g_kl = tau * (p_hat - p)

    band = r >= -config.band
    far = ~band
    g_top = np.zeros_like(r)
    l_top = 0.0
    if band.any():
        diff = r_hat[band] - r[band]
        l_top = float(np.mean(huber(diff, knee)))
        g_top[band] = huber_grad(diff, knee) / band.sum()
    g_fp = np.zeros_like(r)
    l_fp = 0.0
    if far.any():
        over = np.maximum(r_hat[far] + config.band, 0.0)
        l_fp = float(np.mean(huber(over, knee)))
        g_fp[far] = huber_grad(over, knee) * (over > 0) / far.sum()

    excess = float(logsumexp(r_hat) - logsumexp(r))
    l_z = float(huber(max(excess, 0.0), knee))
    g_z = huber_grad(excess, knee) * softmax(r_hat) if excess > 0 else np.zeros_like(r)

    aux_w = 1.0 - config.lambda_kl
    total = config.lambda_kl * l_kl + aux_w * (config.lambda_top * l_top + config.lambda_fp * l_fp + config.lambda_z * l_z)
    grad = config.lambda_kl * g_kl + aux_w * (config.lambda_top * g_top + config.lambda_fp * g_fp + config.lambda_z * g_z)
    return LossBreakdown(total, l_kl, l_top, l_fp, l_z), grad


def loss(s, s_hat, config: LossConfig | None = None) -> LossBreakdown:
    return loss_and_logit_grad(s, s_hat, config or LossConfig())[0]


@dataclass
class PairGrads:
    phi_q: FeatureMapParams
    phi_k: FeatureMapParams


def _trace_backward(trace: TeacherTrace, config: LossConfig, fq, fk):
    lq, lk = fq.g2, fk.g2
    joint = lk + lq  # U x d_phi
    s_hat = logsumexp(joint, axis=-1)
    breakdown, g_logit = loss_and_logit_grad(trace.scores, s_hat, config)
    # d s_hat_j / d joint_jf = softmax_f(joint_j)
    w = np.exp(joint - s_hat[:, None])
    g_joint = g_logit[:, None] * w
    return breakdown, g_joint.sum(axis=0), g_joint


def loss_backward(trace: TeacherTrace, pair: HeadMapPair, config: LossConfig | None = None) -> tuple[LossBreakdown, PairGrads]:
    """Loss for one trace and its gradient w.r.t. both maps of ``pair``."""
    config = config or LossConfig()
    fq = phi_forward(pair.phi_q, trace.q)
    fk = phi_forward(pair.phi_k, trace.keys)
    breakdown, g_q, g_k = _trace_backward(trace, config, fq, fk)
    grads_q, _ = phi_backward(pair.phi_q, trace.q, g_q, fq)
    grads_k, _ = phi_backward(pair.phi_k, trace.keys, g_k, fk)
    return breakdown, PairGrads(grads_q, grads_k)


def student_logits(pair: HeadMapPair, trace: TeacherTrace) -> np.ndarray:
    lq = phi_forward(pair.phi_q, trace.q).g2
    lk = phi_forward(pair.phi_k, trace.keys).g2
    return logsumexp(lk + lq, axis=-1)


def trace_loss(trace: TeacherTrace, pair: HeadMapPair, config: LossConfig | None = None) -> LossBreakdown:
    return loss(trace.scores, student_logits(pair, trace), config or LossConfig())


def _key_blocks(traces: list[TeacherTrace]) -> tuple[np.ndarray, list[slice]]:
    """Stack the distinct key arrays of ``traces``; traces cut from the same
    prefill share one array object and therefore one block."""
    first: dict[int, slice] = {}
    arrays, rows, offset = [], [], 0
    for t in traces:
        sl = first.get(id(t.keys))
        if sl is None:
            sl = slice(offset, offset + t.keys.shape[0])
            offset = sl.stop
            first[id(t.keys)] = sl
            arrays.append(t.keys)
        rows.append(sl)
    return np.concatenate(arrays), rows


def batch_loss_backward(traces: list[TeacherTrace], pair: HeadMapPair, config: LossConfig,
                        need_grad: bool = True) -> tuple[float, PairGrads | None]:
    """Mean loss over ``traces`` and the matching mean gradient.

    Queries go through ``phi_q`` in one batch and every distinct key block
    through ``phi_k`` once.
    """
    qs = np.stack([t.q for t in traces])
    keys, rows = _key_blocks(traces)
    fq = phi_forward(pair.phi_q, qs)
    fk = phi_forward(pair.phi_k, keys)
    g_q = np.zeros_like(fq.g2)
    g_k = np.zeros_like(fk.g2)
    total = 0.0
    for i, (t, sl) in enumerate(zip(traces, rows)):
        joint = fk.g2[sl] + fq.g2[i]
        s_hat = logsumexp(joint, axis=-1)
        breakdown, g_logit = loss_and_logit_grad(t.scores, s_hat, config)
        total += breakdown.total
        if need_grad:
            gj = g_logit[:, None] * np.exp(joint - s_hat[:, None])
            g_q[i] = gj.sum(axis=0)
            g_k[sl] += gj
    scale = 1.0 / len(traces)
    if not need_grad:
        return total * scale, None
    grads_q, _ = phi_backward(pair.phi_q, qs, g_q * scale, fq)
    grads_k, _ = phi_backward(pair.phi_k, keys, g_k * scale, fk)
    return total * scale, PairGrads(grads_q, grads_k)


# --- optimizer and trainer ---------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1:
            raise ValueError(f"invalid optimizer settings: {self}")


class Adam:
    """Adam over the arrays of a list of ``FeatureMapParams``, updated in place."""

    def __init__(self, params: list[FeatureMapParams], config: OptimizerConfig):
        self.params = params
        self.config = config
        self.m = [[np.zeros_like(a) for a in p.arrays()] for p in params]
        self.v = [[np.zeros_like(a) for a in p.arrays()] for p in params]
        self.t = 0

    def step(self, grads: list[FeatureMapParams]) -> None:
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for p, g, ms, vs in zip(self.params, grads, self.m, self.v):
            for a, ga, m, v in zip(p.arrays(), g.arrays(), ms, vs):
                m *= c.beta1
                m += (1.0 - c.beta1) * ga
                v *= c.beta2
                v += (1.0 - c.beta2) * ga * ga
                a -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)


@dataclass
class TrainResult:
    pairs: dict[tuple[int, int], HeadMapPair]
    history: list[float]  # mean loss over all traces; entry 0 is before training
    head_history: dict[tuple[int, int], list[float]] = field(default_factory=dict)


def _mean_loss(traces: list[TeacherTrace], pair: HeadMapPair, config: LossConfig, chunk: int = 256) -> float:
    total = 0.0
    for start in range(0, len(traces), chunk):
        part = traces[start : start + chunk]
        total += batch_loss_backward(part, pair, config, need_grad=False)[0] * len(part)
    return total / len(traces)


def train(traces: list[TeacherTrace], pairs: dict[tuple[int, int], HeadMapPair],
          config: LossConfig | None = None, optimizer: OptimizerConfig | None = None,
          epochs: int = 10, rng: np.random.Generator | None = None) -> TrainResult:
    """Fit each head's maps to its traces with minibatch Adam.

    ``pairs`` is keyed by ``(layer, q_head)`` and is not modified; trained
    copies are returned. Heads without traces keep their parameters.
    """
    config = config or LossConfig()
    optimizer = optimizer or OptimizerConfig()
    if not traces:
        raise ValueError("no traces to train on")
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    if rng is None:
        raise ValueError("train needs an explicit random source")

    by_head: dict[tuple[int, int], list[TeacherTrace]] = defaultdict(list)
    for t in traces:
        by_head[(t.layer, t.q_head)].append(t)
    orphans = sorted(set(by_head) - set(pairs))
    if orphans:
        raise ValueError(f"traces for heads without feature maps: {orphans}")

    trained = {key: pair.copy() for key, pair in pairs.items()}
    head_history: dict[tuple[int, int], list[float]] = {}
    for key in sorted(trained):
        if key not in by_head:
            log.warning("no traces for head %s; parameters left untouched", key)
            continue
        head_traces = by_head[key]
        pair = trained[key]
        opt = Adam([pair.phi_q, pair.phi_k], optimizer)
        hist = [_mean_loss(head_traces, pair, config)]
        for _ in range(epochs):
            order = rng.permutation(len(head_traces))
            for start in range(0, len(order), optimizer.batch_size):
                batch = [head_traces[i] for i in order[start : start + optimizer.batch_size]]
                _, grads = batch_loss_backward(batch, pair, config)
                opt.step([grads.phi_q, grads.phi_k])
            hist.append(_mean_loss(head_traces, pair, config))
        head_history[key] = hist

    counts = {key: len(by_head[key]) for key in head_history}
    total = sum(counts.values())
    history = [
        sum(head_history[key][e] * counts[key] for key in head_history) / total
        for e in range(epochs + 1)
    ]
    return TrainResult(trained, history, head_history)


# --- trace file format -------------------------------------------------------

TRACE_MAGIC = b"KVTRACE1"
TRACE_VERSION = 1


def trace_record_size(d_h: int, support: int) -> int:
    return 5 * 4 + 8 * (d_h + 2 * support * d_h + support)


def save_traces(path, traces: list[TeacherTrace], n_sink: int, n_tail: int) -> None:
    if not traces:
        raise ValueError("no traces to write")
    d_h = traces[0].d_h
    chunks = [TRACE_MAGIC, _binio.pack_u32(TRACE_VERSION, d_h, n_sink, n_tail)]
    for t in traces:
        if t.d_h != d_h:
            raise DimensionError("all traces must share d_h")
        support = t.scores.shape[0]
        chunks.append(_binio.pack_u32(t.layer, t.q_head, t.kv_head, t.n, support))
        chunks += [_binio.pack_f64(t.q), _binio.pack_f64(t.keys), _binio.pack_f64(t.values), _binio.pack_f64(t.scores)]
    Path(path).write_bytes(b"".join(chunks))


@dataclass(frozen=True)
class TraceFile:
    d_h: int
    n_sink: int
    n_tail: int
    traces: list[TeacherTrace]


def load_traces(path, validate: bool = True) -> TraceFile:
    """Read a trace file; checks support = mid and recomputes every score."""
    reader = _binio.Reader(Path(path).read_bytes(), "trace")
    reader.magic(TRACE_MAGIC)
    version, d_h, n_sink, n_tail = reader.u32(4)
    _binio.check_version(version, TRACE_VERSION, "trace")
    if d_h < 1:
        raise DimensionError("trace header declares d_h = 0")
    traces = []
    interned: dict[bytes, np.ndarray] = {}  # identical prefills share arrays, which batching exploits
    while not reader.at_end():
        layer, q_head, kv_head, n, support = reader.u32(5)
        if support != n - n_sink - n_tail:
            raise DimensionError(
                f"trace record has support {support}, mid region of N={n} is {n - n_sink - n_tail}"
            )
        q = reader.f64((d_h,))
        keys = reader.f64((support, d_h))
        keys = interned.setdefault(keys.tobytes(), keys)
        values = reader.f64((support, d_h))
        values = interned.setdefault(values.tobytes(), values)
        scores = reader.f64((support,))
        t = TeacherTrace(layer, q_head, kv_head, n, q, keys, values, scores)
        if validate and t.score_error() > SCORE_TOL:
            raise ScoreMismatchError(f"trace {len(traces)}: stored scores off by {t.score_error():.3g}")
        traces.append(t)
    return TraceFile(d_h, n_sink, n_tail, traces)


def write_traces_jsonl(path, traces: list[TeacherTrace]) -> None:
    """Human-readable dump with the same fields as the binary records."""
    with open(path, "w") as fh:
        for t in traces:
            rec = {
                "layer": t.layer, "q_head": t.q_head, "kv_head": t.kv_head, "N": t.n,
                "support": int(t.scores.shape[0]), "q": t.q.tolist(), "keys": t.keys.tolist(),
                "values": t.values.tolist(), "scores": t.scores.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
