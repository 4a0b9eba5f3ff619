"""
Eviction policy contract
Shared configuration, per-sequence state and the compress-once / decode-many lifecycle
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np

from attention import AttentionStep, PrefillResult, decode_attend
from config import DEFAULT_BLOCK_SIZE
from errors import InvalidPlan, InvalidPositioning
from kv_cache import BudgetPlan, KvCacheView, ModelConfig, TokenKv
from rope import PositioningMode

logger = logging.getLogger(__name__)


class PolicyKind(str, Enum):
    FULL = "full"
    STREAMLLM_R = "streamllm_r"
    STREAMLLM_ABS = "streamllm_abs"
    SAGE = "sage"
    BLOCK_TOPK = "block_topk"


class Pooling(str, Enum):
    MINMAX = "minmax"
    MEAN = "mean"


# ============================================================================
# Configuration
# ============================================================================

@dataclass(frozen=True)
class PolicyConfig:
    """Immutable policy parameters; shareable across sequences"""

    kind: PolicyKind
    plan: Optional[BudgetPlan] = None
    block_size: int = DEFAULT_BLOCK_SIZE
    pooling: Pooling = Pooling.MINMAX

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        object.__setattr__(self, "pooling", Pooling(self.pooling))
        if self.kind is PolicyKind.FULL:
            return
        if self.plan is None:
            raise InvalidPlan(f"{self.kind.value} needs a budget plan")
        if self.kind in (PolicyKind.STREAMLLM_R, PolicyKind.STREAMLLM_ABS):
            if self.plan.topk != 0 or self.plan.sink + self.plan.recent != self.plan.budget:
                raise InvalidPlan(f"StreamLLM plan must have k = 0 and S + R = B, got {self.plan}")
        if self.kind is PolicyKind.SAGE and self.plan.topk < 1:
            raise InvalidPlan("SAGE needs k >= 1")
        if self.kind is PolicyKind.BLOCK_TOPK:
            if self.block_size < 1:
                raise InvalidPlan(f"block size must be >= 1, got {self.block_size}")
            if self.selected_blocks < 1:
                raise InvalidPlan(
                    f"(B - S - R) / C = ({self.plan.budget} - {self.plan.sink} - "
                    f"{self.plan.recent}) / {self.block_size} selects no block"
                )

    @classmethod
    def build(
        cls,
        kind,
        budget: Optional[int] = None,
        group_size: int = 1,
        sink: Optional[int] = None,
        topk: Optional[int] = None,
        recent: Optional[int] = None,
        block_size: int = DEFAULT_BLOCK_SIZE,
        pooling=Pooling.MINMAX,
    ) -> "PolicyConfig":
        """Derive the plan for `kind`; unspecified components use the default split"""
        kind = PolicyKind(kind)
        if kind is PolicyKind.FULL:
            return cls(kind, None, block_size, pooling)
        if budget is None:
            raise InvalidPlan(f"{kind.value} needs a token budget")
        if kind in (PolicyKind.STREAMLLM_R, PolicyKind.STREAMLLM_ABS):
            if topk:
                raise InvalidPlan("StreamLLM keeps no top-k entries")
            if sink is None and recent is not None:
                sink = budget - recent
            plan = BudgetPlan.for_streamllm(budget, sink)
            if recent is not None and recent != plan.recent:
                raise InvalidPlan(f"StreamLLM needs S + R = B, got S={plan.sink}, R={recent}")
        else:
            plan = BudgetPlan.for_sage(budget, group_size, sink, topk, recent)
        return cls(kind, plan, block_size, pooling)

    @property
    def positioning(self) -> PositioningMode:
        if self.kind is PolicyKind.STREAMLLM_R:
            return PositioningMode.WINDOW_RELATIVE
        return PositioningMode.ABSOLUTE

    @property
    def stores_pre_rope(self) -> bool:
        return self.kind is PolicyKind.STREAMLLM_R

    @property
    def selected_blocks(self) -> int:
        if self.plan is None:
            return 0
        return (self.plan.budget - self.plan.sink - self.plan.recent) // self.block_size

    @property
    def label(self) -> str:
        if self.kind is PolicyKind.BLOCK_TOPK and self.pooling is Pooling.MEAN:
            return "block_topk_mean"
        return self.kind.value

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"kind": self.kind.value}
        if self.plan is not None:
            out.update(
                budget=self.plan.budget,
                sink=self.plan.sink,
                topk=self.plan.topk,
                recent=self.plan.recent,
            )
        if self.kind is PolicyKind.BLOCK_TOPK:
            out.update(block_size=self.block_size, pooling=self.pooling.value)
        out["positioning"] = self.positioning.value
        return out


# ============================================================================
# State
# ============================================================================

@dataclass(eq=False)
class PolicyState:
    """Per-sequence, single-owner state"""

    cache: Any
    step: int = 0
    evicted: bool = True
    # [layer][q_head] evictable indices fixed at compression (SAGE only)
    selections: Optional[List[List[np.ndarray]]] = None


# ============================================================================
# Policy base
# ============================================================================

class EvictionPolicy(ABC):
    """
    Lifecycle: compress() once after prefill, then per decode step push() the new
    token's KV and attend() with its queries.
    """

    name = "base"
    description = ""

    def __init__(self, config: PolicyConfig, model: ModelConfig):
        self.config = config
        self.model = model

    @property
    def positioning(self) -> PositioningMode:
        return self.config.positioning

    @property
    def stores_pre_rope(self) -> bool:
        return self.config.stores_pre_rope

    def _check_prefill(self, prefill: PrefillResult) -> None:
        if prefill.cache.pre_rope != self.stores_pre_rope:
            raise InvalidPositioning(
                f"{self.name} expects keys stored {'before' if self.stores_pre_rope else 'after'} rotation"
            )

    def _no_eviction(self, prefill: PrefillResult) -> PolicyState:
        logger.info(
            "%s: budget %s >= N=%d, keeping the full cache",
            self.name, self.config.plan.budget if self.config.plan else "-", prefill.cache.length,
        )
        return PolicyState(cache=prefill.cache.copy(), evicted=False)

    @abstractmethod
    def compress(self, prefill: PrefillResult) -> PolicyState:
        """Build the retained cache from the prefill result"""

    def push(self, state: PolicyState, tokens: List[List[TokenKv]]) -> PolicyState:
        """Add one decoded token ([layer][kv_head] entries)"""
        for layer, row in enumerate(tokens):
            for kv_head, token in enumerate(row):
                state.cache.push(layer, kv_head, token)
        state.step += 1
        return state

    def view_for(self, state: PolicyState, queries: np.ndarray) -> KvCacheView:
        return state.cache

    def attend(self, state: PolicyState, queries: np.ndarray) -> AttentionStep:
        return decode_attend(queries, self.view_for(state, queries), self.positioning, self.model)

    def retained_entries(self, state: PolicyState, layer: int) -> int:
        return state.cache.retained_entries(layer)
