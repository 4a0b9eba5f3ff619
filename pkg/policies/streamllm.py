"""
StreamLLM
Sink tokens plus a sliding recent window; the middle of the context is dropped.

Two positioning variants:
    streamllm_r    keys stored before rotation, positions re-indexed 0..len-1 inside the window
    streamllm_abs  keys rotated at their original absolute positions
"""

import logging

from attention import PrefillResult
from errors import BudgetTooLarge, InvalidPlan, InvalidPositioning
from kv_cache import BudgetPlan, FullKvCache, KvSegment, ReducedKvCache
from policies.base import EvictionPolicy, PolicyState
from rope import PositioningMode

logger = logging.getLogger(__name__)


def streamllm_compress(full: FullKvCache, plan: BudgetPlan, mode: PositioningMode) -> ReducedKvCache:
    """
    Keep the first S entries and the final B - S entries (the last token included)

    Args:
        full: prefill cache of N entries per (layer, kv_head)
        plan: StreamLLM plan (k == 0, S + R == B)
        mode: WINDOW_RELATIVE needs keys stored before rotation

    Returns:
        ReducedKvCache with empty top-k segments and a recent FIFO of capacity B - S - 1

    Raises:
        BudgetTooLarge: B > N, nothing to evict
    """
    n = full.length
    if plan.topk != 0 or plan.sink + plan.recent != plan.budget:
        raise InvalidPlan(f"{plan} is not a StreamLLM plan")
    if plan.budget > n:
        raise BudgetTooLarge(f"B = {plan.budget} > N = {n}: no eviction needed")
    if PositioningMode(mode) is PositioningMode.WINDOW_RELATIVE and not full.pre_rope:
        raise InvalidPositioning("window-relative positioning needs keys stored before rotation")

    config = full.config
    window = plan.budget - plan.sink  # recent entries including the last token
    sink, recent, last = [], [], []
    for layer_segments in full.segments:
        sink.append([seg.slice(0, plan.sink) for seg in layer_segments])
        recent.append([seg.slice(n - window, n - 1) for seg in layer_segments])
        last.append([seg.slice(n - 1, n).token(0) for seg in layer_segments])

    topk = [
        [KvSegment.empty(config.head_dim, full.pre_rope) for _ in range(config.q_heads)]
        for _ in range(config.layers)
    ]
    logger.debug(
        "streamllm kept sink 1..%d and recent %d..%d of N=%d", plan.sink, n - window + 1, n, n
    )
    return ReducedKvCache(config, sink, recent, last, topk, window - 1)


class StreamLLMPolicy(EvictionPolicy):
    name = "streamllm"
    description = "Attention sinks plus a sliding recent window"

    def compress(self, prefill: PrefillResult) -> PolicyState:
        self._check_prefill(prefill)
        if self.config.plan.budget >= prefill.cache.length:
            return self._no_eviction(prefill)
        reduced = streamllm_compress(prefill.cache, self.config.plan, self.positioning)
        return PolicyState(cache=reduced)


class StreamLLMRelativePolicy(StreamLLMPolicy):
    name = "streamllm_r"
    description = "StreamLLM with positions re-indexed inside the kept window"


class StreamLLMAbsolutePolicy(StreamLLMPolicy):
    name = "streamllm_abs"
    description = "StreamLLM keeping the original absolute positions"
