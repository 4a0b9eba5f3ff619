"""
Accounting
Closed-form cache sizes, speedup ratios and top-k selection costs.

Counts are abstract element / operation totals, not wall-clock predictions. Prefill
pipeline overlap (hiding selection behind the next layer's prefill) is not modelled.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Dict, Optional, Tuple

import pandas as pd

from config import ELEMENT_BYTES
from errors import InvalidPlan
from kv_cache import BudgetPlan, ModelConfig


class SelectionMode(str, Enum):
    SAGE_WITH_SCORES = "sage_with_scores"
    SAGE_DOT_PRODUCT = "sage_dot_product"
    BLOCK_PER_STEP = "block_per_step"


@dataclass(frozen=True)
class CacheMemory:
    elements: int
    bytes: int


@dataclass(frozen=True)
class SelectionCost:
    multiplies: float
    comparisons: float

    @property
    def total(self) -> float:
        return self.multiplies + self.comparisons


def cache_memory(
    config: ModelConfig,
    n: int,
    element_bytes: int = ELEMENT_BYTES,
    plan: Optional[BudgetPlan] = None,
) -> CacheMemory:
    """
    Keys + values held for N tokens, or for a SAGE-reduced cache when a plan is given

    Full: 2 * L * N * H_kv * d_h. Reduced: 2 * L * (S + R + 1) * H_kv * d_h shared
    plus 2 * L * k * H_q * d_h for the per-query-head selections.
    """
    if n < 1 or element_bytes < 1:
        raise InvalidPlan(f"N ({n}) and element width ({element_bytes}) must be positive")
    if plan is None:
        elements = 2 * config.layers * n * config.kv_heads * config.head_dim
    else:
        shared = 2 * config.layers * (plan.sink + plan.recent + 1) * config.kv_heads * config.head_dim
        elements = shared + 2 * config.layers * plan.topk * config.q_heads * config.head_dim
    return CacheMemory(elements, elements * element_bytes)


def streamllm_speedup(plan: BudgetPlan, group_size: int) -> float:
    """(S + G*k + R) / (S + k + R): per-head attention length StreamLLM pays vs SAGE"""
    plan.check_sage(group_size)
    return (plan.sink + group_size * plan.topk + plan.recent) / (plan.sink + plan.topk + plan.recent)


def attention_speedup(n: int, budget: int, plan: BudgetPlan, group_size: int) -> Tuple[float, float]:
    """(StreamLLM, SAGE) speedup over full attention: N / B and streamllm_speedup * N / B"""
    if n < budget:
        raise InvalidPlan(f"N = {n} is shorter than the budget B = {budget}")
    base = n / budget
    return base, streamllm_speedup(plan, group_size) * base


def _log2(x: float) -> float:
    return math.log2(x) if x > 1 else 0.0


def selection_cost(
    e: int, d: int, steps: int, n: int, block_size: int, mode: SelectionMode
) -> SelectionCost:
    """
    Operation counts for choosing the kept entries

    sage_with_scores: E log2 E comparisons once (scores come free from prefill)
    sage_dot_product: E * d multiplies + E log2 E comparisons once
    block_per_step:   T * (N/C) * (d + log2(N/C)) per layer
    """
    mode = SelectionMode(mode)
    if mode is SelectionMode.SAGE_WITH_SCORES:
        return SelectionCost(0.0, e * _log2(e))
    if mode is SelectionMode.SAGE_DOT_PRODUCT:
        return SelectionCost(float(e * d), e * _log2(e))
    blocks = n / block_size
    return SelectionCost(steps * blocks * d, steps * blocks * _log2(blocks))


def recommended_ranges(budget: int, group_size: int) -> Dict[str, Tuple[float, float]]:
    return {
        "sink": (budget / 8, budget / 4),
        "topk": (budget / (4 * group_size), budget / (2 * group_size)),
    }


@dataclass(frozen=True)
class CostReport:
    full_cache_elements: int
    reduced_cache_elements: int
    full_cache_bytes: int
    reduced_cache_bytes: int
    streamllm_speedup: float
    streamllm_attention_speedup: float
    sage_attention_speedup: float
    sage_selection_comparisons: float
    sage_dot_product_multiplies: float
    block_selection_operations: float
    # 2 * visible * d_h multiplies per query head per decoded token
    full_decode_multiplies: int
    streamllm_decode_multiplies: int
    sage_decode_multiplies: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_table(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"metric": k, "value": v} for k, v in self.to_dict().items()], columns=["metric", "value"]
        )


def cost_report(
    config: ModelConfig,
    n: int,
    plan: BudgetPlan,
    element_bytes: int = ELEMENT_BYTES,
    steps: int = 1,
    block_size: int = 16,
) -> CostReport:
    """Every accounting term for one (model, N, plan)"""
    g = config.group_size
    full = cache_memory(config, n, element_bytes)
    reduced = cache_memory(config, n, element_bytes, plan)
    e = max(n - 1 - plan.sink - plan.recent, 0)
    sl_attn, sage_attn = attention_speedup(n, plan.budget, plan, g)
    with_scores = selection_cost(e, config.head_dim, steps, n, block_size, SelectionMode.SAGE_WITH_SCORES)
    dot = selection_cost(e, config.head_dim, steps, n, block_size, SelectionMode.SAGE_DOT_PRODUCT)
    block = selection_cost(e, config.head_dim, steps, n, block_size, SelectionMode.BLOCK_PER_STEP)
    d = config.head_dim
    return CostReport(
        full_cache_elements=full.elements,
        reduced_cache_elements=reduced.elements,
        full_cache_bytes=full.bytes,
        reduced_cache_bytes=reduced.bytes,
        streamllm_speedup=streamllm_speedup(plan, g),
        streamllm_attention_speedup=sl_attn,
        sage_attention_speedup=sage_attn,
        sage_selection_comparisons=with_scores.comparisons,
        sage_dot_product_multiplies=dot.multiplies,
        block_selection_operations=block.total * config.layers,
        full_decode_multiplies=2 * n * d,
        streamllm_decode_multiplies=2 * plan.budget * d,
        sage_decode_multiplies=2 * plan.reduced_length() * d,
    )
