"""Per-query and per-head diagnostics on the mid region.

All quantities use the teacher scores restricted to the causally visible
mid set and renormalized there.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .attention import AttentionHeadState, Partition, exact_terms, full_attention, scores, topk_select
from .budget import BudgetConfig, k_hyb_for_budget, k_topk_for_budget
from .completion import StableCompletionCache, hybrid_decode
from .feature_map import HeadMapPair
from .numerics import softmax

REL_L1_EPS = 1e-12


def visible_mid(partition: Partition, j_max: int) -> np.ndarray:
    mid = partition.mid
    return mid[mid <= j_max]


def mid_probs(q, state: AttentionHeadState, visible) -> np.ndarray:
    return softmax(scores(q, state, visible))


def mid_entropy(q, state: AttentionHeadState, visible) -> float:
    """Normalized entropy in [0, 1]; a single visible token counts as 0."""
    visible = np.asarray(visible)
    if visible.size == 0:
        raise ValueError("mid entropy is undefined on an empty visible set")
    if visible.size == 1:
        return 0.0
    return entropy_from_probs(mid_probs(q, state, visible))


def entropy_from_probs(p) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    h = -float(np.sum(nz * np.log(nz))) / math.log(p.size)
    return min(max(h, 0.0), 1.0)


def rel_l1_error(y_hat, y_full, eps: float = REL_L1_EPS) -> float:
    y_hat, y_full = np.asarray(y_hat), np.asarray(y_full)
    return float(np.sum(np.abs(y_hat - y_full)) / (np.sum(np.abs(y_full)) + eps))


def mass_curve(q, state: AttentionHeadState, visible) -> np.ndarray:
    """Cumulative mid mass captured by the top-K visible tokens, K = 0..|M(q)|."""
    p = mid_probs(q, state, visible)
    return np.concatenate([[0.0], np.cumsum(np.sort(p)[::-1])])


@dataclass(frozen=True)
class Instance:
    """One decode query against one head's prefill."""

    q: np.ndarray
    state: AttentionHeadState
    partition: Partition
    pair: HeadMapPair | None = None
    cache: StableCompletionCache | None = None


def selection_only_error(inst: Instance, k: int) -> float:
    loaded = np.concatenate([inst.partition.anchors, topk_select(inst.q, inst.state, inst.partition, k)])
    y_sel = exact_terms(inst.q, inst.state, loaded).y
    return rel_l1_error(y_sel, full_attention(inst.q, inst.state))


def hybrid_error(inst: Instance, k: int) -> tuple[float, float]:
    """Relative error of the hybrid output and its completion mass share."""
    res = hybrid_decode(inst.q, inst.state, inst.partition, k, inst.pair, inst.cache)
    return rel_l1_error(res.y, full_attention(inst.q, inst.state)), res.rho_z


@dataclass(frozen=True)
class GainResult:
    e_sel: float
    e_hyb: float
    k_topk: int
    k_hyb: int
    rho_z: float

    @property
    def gain(self) -> float:
        return self.e_sel - self.e_hyb


def gain_at_budget(instances: Sequence[Instance], budget: int, budget_config: BudgetConfig,
                   l_gen=None) -> GainResult:
    """Mean selection-only vs hybrid error when both are charged the same budget.

    Retrieval counts are clamped to the mid size of each instance.
    """
    if not instances:
        raise ValueError("no instances")
    kt = k_topk_for_budget(budget_config, budget)
    kh, _ = k_hyb_for_budget(budget_config, budget, l_gen)
    e_sel, e_hyb, rho = [], [], []
    for inst in instances:
        m = inst.partition.mid_size
        e_sel.append(selection_only_error(inst, min(kt, m)))
        e, r = hybrid_error(inst, min(kh, m))
        e_hyb.append(e)
        rho.append(r)
    return GainResult(float(np.mean(e_sel)), float(np.mean(e_hyb)), kt, kh, float(np.mean(rho)))


@dataclass(frozen=True)
class QueryDiagnostics:
    layer: int
    head: int
    h_mid: float
    e_sel: float
    e_hyb: float
    rho_z: float
    prefill: int = 0
    query: int = 0

    @property
    def gain(self) -> float:
        return self.e_sel - self.e_hyb


def query_diagnostics(inst: Instance, k_sel: int, k_hyb: int, layer: int = 0, head: int = 0,
                      prefill: int = 0, query: int = 0) -> QueryDiagnostics:
    """Entropy and both errors for one query; retrieval sizes are clamped to |M|."""
    m = inst.partition.mid_size
    e_hyb, rho = hybrid_error(inst, min(k_hyb, m))
    return QueryDiagnostics(layer, head, mid_entropy(inst.q, inst.state, inst.partition.mid),
                            selection_only_error(inst, min(k_sel, m)), e_hyb, rho, prefill, query)


@dataclass(frozen=True)
class HeadDiagnostics:
    layer: int
    head: int
    h_mid: float
    e_sel: float
    e_hyb: float
    gain: float
    rho_z: float
    n_queries: int
    mass_curve: np.ndarray | None = None


HEAD_COLUMNS = ["layer", "head", "H_mid", "e_sel", "e_hyb", "gain", "rho_Z"]
QUARTILE_COLUMNS = ["quartile", "n", "H_mid_min", "H_mid_max", "H_mid", "e_sel", "e_hyb", "gain", "rho_Z"]
MASS_CURVE_COLUMNS = ["layer", "head", "K", "C"]
QUERY_COLUMNS = ["layer", "head", "prefill", "query", "H_mid", "e_sel", "e_hyb", "gain", "rho_Z"]


def aggregate_heads(rows: Iterable[QueryDiagnostics], mass_curves: dict | None = None) -> list[HeadDiagnostics]:
    """Average per-query diagnostics per (layer, head), in (layer, head) order."""
    grouped: dict[tuple[int, int], list[QueryDiagnostics]] = {}
    for r in rows:
        grouped.setdefault((r.layer, r.head), []).append(r)
    out = []
    for key in sorted(grouped):
        g = grouped[key]
        e_sel = float(np.mean([r.e_sel for r in g]))
        e_hyb = float(np.mean([r.e_hyb for r in g]))
        out.append(HeadDiagnostics(
            key[0], key[1], float(np.mean([r.h_mid for r in g])), e_sel, e_hyb, e_sel - e_hyb,
            float(np.mean([r.rho_z for r in g])), len(g),
            None if mass_curves is None else mass_curves.get(key),
        ))
    return out


def quartile_groups(h_values: Sequence[float], tiebreak: Sequence | None = None) -> list[np.ndarray]:
    """Split indices into four entropy quartiles (lowest first) by rank.

    Ties in ``h_values`` are ordered by ``tiebreak`` (default: position).
    Group sizes differ by at most one.
    """
    h = np.asarray(h_values, dtype=np.float64)
    keys = list(range(len(h))) if tiebreak is None else list(tiebreak)
    order = sorted(range(len(h)), key=lambda i: (h[i], keys[i]))
    return [np.asarray(chunk, dtype=np.int64) for chunk in np.array_split(np.asarray(order, dtype=np.int64), 4)]


@dataclass(frozen=True)
class QuartileSummary:
    quartile: int
    n: int
    h_min: float
    h_max: float
    h_mid: float
    e_sel: float
    e_hyb: float
    gain: float
    rho_z: float


def quartile_summary(rows: Sequence[QueryDiagnostics | HeadDiagnostics]) -> list[QuartileSummary]:
    h = [r.h_mid for r in rows]
    groups = quartile_groups(h, [(r.layer, r.head) for r in rows])
    out = []
    for qi, idx in enumerate(groups, start=1):
        sel = [rows[i] for i in idx]
        if not sel:
            out.append(QuartileSummary(qi, 0, *(math.nan,) * 7))
            continue
        hs = [r.h_mid for r in sel]
        e_sel = float(np.mean([r.e_sel for r in sel]))
        e_hyb = float(np.mean([r.e_hyb for r in sel]))
        out.append(QuartileSummary(qi, len(sel), min(hs), max(hs), float(np.mean(hs)), e_sel, e_hyb,
                                   e_sel - e_hyb, float(np.mean([r.rho_z for r in sel]))))
    return out


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def heads_csv(heads: Sequence[HeadDiagnostics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEAD_COLUMNS)
    for h in heads:
        w.writerow([h.layer, h.head, _fmt(h.h_mid), _fmt(h.e_sel), _fmt(h.e_hyb), _fmt(h.gain), _fmt(h.rho_z)])
    return buf.getvalue()


def queries_csv(rows: Sequence[QueryDiagnostics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(QUERY_COLUMNS)
    for r in rows:
        w.writerow([r.layer, r.head, r.prefill, r.query] + [_fmt(v) for v in (r.h_mid, r.e_sel, r.e_hyb, r.gain, r.rho_z)])
    return buf.getvalue()


def quartiles_csv(quartiles: Sequence[QuartileSummary]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(QUARTILE_COLUMNS)
    for q in quartiles:
        w.writerow([q.quartile, q.n] + [_fmt(v) for v in (q.h_min, q.h_max, q.h_mid, q.e_sel, q.e_hyb, q.gain, q.rho_z)])
    return buf.getvalue()


def mass_curve_csv(curves: dict[tuple[int, int], np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MASS_CURVE_COLUMNS)
    for (layer, head) in sorted(curves):
        for k, c in enumerate(curves[(layer, head)]):
            w.writerow([layer, head, k, _fmt(c)])
    return buf.getvalue()
