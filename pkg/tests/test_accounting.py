import pytest

from accounting import (
    SelectionMode,
    attention_speedup,
    cache_memory,
    cost_report,
    recommended_ranges,
    selection_cost,
    streamllm_speedup,
)
from errors import InvalidPlan
from kv_cache import BudgetPlan, ModelConfig, default_plan


def test_full_cache_memory_example():
    config = ModelConfig(layers=2, q_heads=4, kv_heads=2, head_dim=4)
    mem = cache_memory(config, 16, element_bytes=4)
    assert (mem.elements, mem.bytes) == (512, 2048)


def test_reduced_cache_memory():
    config = ModelConfig(layers=2, q_heads=4, kv_heads=2, head_dim=4)
    plan = BudgetPlan(16, 4, 2, 7)
    mem = cache_memory(config, 64, element_bytes=2, plan=plan)
    shared = 2 * 2 * (4 + 7 + 1) * 2 * 4
    selected = 2 * 2 * 2 * 4 * 4
    assert mem.elements == shared + selected
    assert mem.bytes == 2 * mem.elements


@pytest.mark.parametrize(
    "plan, g, expected",
    [
        (BudgetPlan(8192, 2048, 1024, 2048), 4, 1.6),
        (BudgetPlan(8192, 2048, 4096, 2048), 1, 1.0),
        (BudgetPlan(2800, 700, 200, 700), 7, 1.75),
    ],
)
def test_streamllm_speedup(plan, g, expected):
    assert streamllm_speedup(plan, g) == pytest.approx(expected, abs=1e-12)


def test_speedup_rejects_mismatched_plan():
    with pytest.raises(InvalidPlan):
        streamllm_speedup(BudgetPlan(8192, 2048, 1024, 2048), 2)


def test_attention_speedup_example():
    streamllm, sage = attention_speedup(131072, 8192, default_plan(8192, 4), 4)
    assert streamllm == pytest.approx(16.0)
    assert sage == pytest.approx(25.6)


def test_attention_speedup_short_sequence():
    with pytest.raises(InvalidPlan):
        attention_speedup(4096, 8192, default_plan(8192, 4), 4)


def test_selection_cost_sage():
    with_scores = selection_cost(1024, 128, 1, 0, 16, SelectionMode.SAGE_WITH_SCORES)
    dot = selection_cost(1024, 128, 1, 0, 16, "sage_dot_product")
    assert with_scores.multiplies == 0
    assert with_scores.comparisons == pytest.approx(10240)
    assert dot.multiplies == 131072
    assert dot.comparisons == pytest.approx(10240)


def test_selection_cost_block_per_step():
    cost = selection_cost(0, 128, 100, 8192, 16, SelectionMode.BLOCK_PER_STEP)
    assert cost.total == pytest.approx(7_014_400)


def test_recommended_ranges():
    ranges = recommended_ranges(8192, 4)
    assert ranges["sink"] == (1024, 2048)
    assert ranges["topk"] == (512, 1024)


def test_cost_report_terms():
    config = ModelConfig(layers=1, q_heads=4, kv_heads=1, head_dim=128)
    plan = default_plan(8192, 4)
    report = cost_report(config, 131072, plan, element_bytes=2, steps=100, block_size=16)
    assert report.streamllm_speedup == pytest.approx(1.6)
    assert report.sage_attention_speedup == pytest.approx(25.6)
    assert report.reduced_cache_elements < report.full_cache_elements
    assert report.full_cache_bytes == 2 * report.full_cache_elements
    assert report.sage_decode_multiplies == 2 * 5121 * 128
    assert list(report.to_table().columns) == ["metric", "value"]
    assert report.to_dict()["full_decode_multiplies"] == 2 * 131072 * 128
