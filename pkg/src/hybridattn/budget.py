"""Token-equivalent KV-read accounting.

One exact KV token for one KV-head costs ``2 * d_h * b_dtype`` bytes. The
stable completion cache costs ``(d_phi * d_h + 2 * d_phi) * b_dtype`` bytes
once per request, i.e. ``d_phi/2 + d_phi/d_h`` token-equivalents. Ratios
are kept as ``Fraction`` so ceilings and floors are exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

INFEASIBLE = "--"


@dataclass(frozen=True)
class BudgetConfig:
    d_h: int
    d_phi: int
    n: int  # prefill length
    n_sink: int = 4
    n_tail: int = 16
    b_dtype: int = 2
    l_gen: float = 1

    def __post_init__(self):
        for name in ("d_h", "d_phi", "n"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_sink < 0 or self.n_tail < 0:
            raise ValueError("anchor counts must be non-negative")
        if self.b_dtype not in (1, 2, 4, 8):
            raise ValueError(f"b_dtype must be 1, 2, 4 or 8 bytes, got {self.b_dtype}")
        _check_lgen(self.l_gen)

    @property
    def anchors(self) -> int:
        return self.n_sink + self.n_tail


def _check_lgen(l_gen) -> None:
    if not l_gen >= 1:
        raise ValueError(f"L_gen must be >= 1, got {l_gen}")


def as_fraction(f) -> Fraction:
    """Exact rational for a budget fraction; floats go through their shortest repr."""
    if isinstance(f, Fraction):
        return f
    if isinstance(f, float):
        return Fraction(repr(f))
    return Fraction(f)


def token_bytes(config: BudgetConfig) -> int:
    return 2 * config.d_h * config.b_dtype


def phi_fetch_bytes(config: BudgetConfig) -> int:
    return (config.d_phi * config.d_h + 2 * config.d_phi) * config.b_dtype


def phi_fetch_token_equiv(config: BudgetConfig) -> Fraction:
    r = Fraction(phi_fetch_bytes(config), token_bytes(config))
    assert r == Fraction(config.d_phi, 2) + Fraction(config.d_phi, config.d_h)
    return r


def n_off(config: BudgetConfig) -> int:
    return math.ceil(phi_fetch_token_equiv(config))


def budget_tokens(n: int, f) -> int:
    f = as_fraction(f)
    if f < 0:
        raise ValueError("budget fraction must be non-negative")
    return math.ceil(f * n)


def k_topk_for_budget(config: BudgetConfig, budget: int) -> int:
    return max(0, budget - config.anchors)


def _amortized(config: BudgetConfig, l_gen) -> Fraction:
    _check_lgen(l_gen)
    if l_gen == math.inf:
        return Fraction(0)
    return phi_fetch_token_equiv(config) / as_fraction(l_gen)


def k_hyb_for_budget(config: BudgetConfig, budget: int, l_gen=None) -> tuple[int, bool]:
    """Largest retrieval count whose amortized per-step reads fit ``budget``.

    ``feasible`` is False when even ``k = 0`` overshoots the budget; at
    ``L_gen = 1`` that is exactly ``budget < anchors + ceil(R_phi)``.
    """
    l_gen = config.l_gen if l_gen is None else l_gen
    slack = budget - config.anchors - _amortized(config, l_gen)
    return max(0, math.floor(slack)), slack >= 0


def k_topk(config: BudgetConfig, f) -> int:
    return k_topk_for_budget(config, budget_tokens(config.n, f))


def k_hyb(config: BudgetConfig, f, l_gen=None) -> tuple[int, bool]:
    return k_hyb_for_budget(config, budget_tokens(config.n, f), l_gen)


def per_step_reads(config: BudgetConfig, k: int, l_gen=None) -> Fraction:
    """Exact reads plus the amortized one-time cache fetch, in token-equivalents."""
    l_gen = config.l_gen if l_gen is None else l_gen
    return config.anchors + k + _amortized(config, l_gen)


@dataclass(frozen=True)
class BudgetRow:
    f: Fraction
    n: int
    k_topk: int
    k_hyb: int
    feasible: bool
    l_gen: float

    def csv_fields(self) -> list[str]:
        l_gen = "inf" if self.l_gen == math.inf else str(self.l_gen)
        k_hyb = str(self.k_hyb) if self.feasible else INFEASIBLE
        return [_fmt_fraction(self.f), str(self.n), str(self.k_topk), k_hyb,
                "true" if self.feasible else "false", l_gen]


def _fmt_fraction(f: Fraction) -> str:
    # budget fractions are short decimals; print them the way they were given
    return format(float(f), "g") if Fraction(repr(float(f))) == f else str(f)


BUDGET_HEADER = ["f", "n", "k_topk", "k_hyb", "feasible", "L_gen"]


def budget_table(config: BudgetConfig, fractions, l_gens=None) -> list[BudgetRow]:
    rows = []
    for l_gen in (l_gens or [config.l_gen]):
        for f in fractions:
            f = as_fraction(f)
            n = budget_tokens(config.n, f)
            k, ok = k_hyb_for_budget(config, n, l_gen)
            rows.append(BudgetRow(f, n, k_topk_for_budget(config, n), k, ok, l_gen))
    return rows
