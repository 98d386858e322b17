"""Sparse Top-K attention with a learned positive feature-map completion.

Exact softmax over anchors and retrieved tokens, plus a low-rank estimate
of the unretrieved mid region read from a small per-head cache, merged
under one normalizer.
"""

from .attention import AttentionHeadState, Partition, full_attention, make_partition, topk_select
from .budget import BudgetConfig, k_hyb, k_topk
from .completion import build_stable_cache, hybrid_decode
from .feature_map import FeatureMapParams, HeadMapPair, init_pair
from .numerics import seeded_rng

__version__ = "0.1.0"

__all__ = [
    "AttentionHeadState", "Partition", "full_attention", "make_partition", "topk_select",
    "BudgetConfig", "k_hyb", "k_topk", "build_stable_cache", "hybrid_decode",
    "FeatureMapParams", "HeadMapPair", "init_pair", "seeded_rng", "__version__",
]
