"""
SAGE
One-time top-k eviction: after prefill, every query head keeps the k evictable
entries the last prompt token attended most, next to shared sink and recent windows.
The selection is never revisited during decode.
"""

import logging

import numpy as np

from attention import PrefillResult
from errors import ShapeMismatch
from kv_cache import BudgetPlan, ReducedKvCache, SegmentedKvCache, build_reduced, partition_cache
from policies.base import EvictionPolicy, PolicyState
from policies.selection import top_k_indices

logger = logging.getLogger(__name__)


def sage_compress(seg: SegmentedKvCache, last_row_scores: np.ndarray, plan: BudgetPlan) -> ReducedKvCache:
    """
    Per (layer, query head) top-k over the evictable segment

    Args:
        seg: cache partitioned with the plan's S and R
        last_row_scores: (L, H_q, N - 1 or N) last-token attention over the prompt
        plan: SAGE plan (S + G*k + R == B)

    Returns:
        ReducedKvCache holding only sink, the H_q selections, recent and last
    """
    config = seg.config
    plan.check_sage(config.group_size)
    scores = np.asarray(last_row_scores, dtype=np.float64)
    n_prior = seg.total_len - 1
    if scores.shape[:2] != (config.layers, config.q_heads) or scores.shape[2] < n_prior:
        raise ShapeMismatch(
            f"last-row scores {scores.shape} must cover ({config.layers}, {config.q_heads}, {n_prior})"
        )

    lo, hi = seg.sink_len, seg.sink_len + seg.evictable_len
    selections = [
        [top_k_indices(scores[layer, head, lo:hi], plan.topk) for head in range(config.q_heads)]
        for layer in range(config.layers)
    ]
    reduced = build_reduced(seg, selections)
    logger.info(
        "sage compressed N=%d to S=%d k=%d R=%d per head (E=%d evicted candidates)",
        seg.total_len, plan.sink, plan.topk, plan.recent, seg.evictable_len,
    )
    return reduced


class SagePolicy(EvictionPolicy):
    name = "sage"
    description = "One-time per-head top-k selection after prefill"

    def compress(self, prefill: PrefillResult) -> PolicyState:
        self._check_prefill(prefill)
        plan = self.config.plan
        if plan.budget >= prefill.cache.length:
            return self._no_eviction(prefill)
        seg = partition_cache(prefill.cache, plan.sink, plan.recent)
        reduced = sage_compress(seg, prefill.last_row_scores, plan)
        return PolicyState(cache=reduced, selections=reduced.selections)
