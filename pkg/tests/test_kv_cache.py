import numpy as np
import pytest

from conftest import make_full, make_token
from errors import (
    BudgetTooLarge,
    InvalidModelConfig,
    InvalidPlan,
    InvalidPosition,
    InvalidSelection,
    OddHeadDim,
)
from kv_cache import BudgetPlan, KvSegment, ModelConfig, build_reduced, default_plan, fifo_push, partition_cache


# ---------------- ModelConfig ---------------- #

def test_group_size_and_head_mapping():
    m = ModelConfig(layers=1, q_heads=8, kv_heads=2, head_dim=4)
    assert m.group_size == 4
    assert [m.kv_head_for(h) for h in range(8)] == [0, 0, 0, 0, 1, 1, 1, 1]
    assert list(m.q_heads_for(1)) == [4, 5, 6, 7]


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(layers=0, q_heads=4, kv_heads=1, head_dim=4),
        dict(layers=1, q_heads=6, kv_heads=4, head_dim=4),
        dict(layers=1, q_heads=4, kv_heads=0, head_dim=4),
    ],
)
def test_invalid_model_config(kwargs):
    with pytest.raises(InvalidModelConfig):
        ModelConfig(**kwargs)


def test_odd_head_dim():
    with pytest.raises(OddHeadDim):
        ModelConfig(layers=1, q_heads=1, kv_heads=1, head_dim=5)


# ---------------- BudgetPlan ---------------- #

@pytest.mark.parametrize(
    "budget, g, expected",
    [
        (8192, 4, (2048, 1024, 2048)),
        (8192, 7, (2048, 512, 2560)),
        (8192, 1, (2048, 4096, 2048)),
    ],
)
def test_default_plan_published_settings(budget, g, expected):
    plan = default_plan(budget, g)
    assert (plan.sink, plan.topk, plan.recent) == expected
    assert plan.sink + g * plan.topk + plan.recent == budget


def test_plan_identity_holds_for_every_default():
    for budget in (16, 100, 128, 513, 1000, 4096):
        for g in (1, 2, 3, 4, 7, 8):
            if budget // (2 * g) < 1:
                continue
            plan = BudgetPlan.for_sage(budget, g)
            assert plan.sink + g * plan.topk + plan.recent == budget
            assert min(plan.sink, plan.topk, plan.recent) >= 0


def test_explicit_components_and_remainder():
    plan = BudgetPlan.for_sage(128, 2, sink=16, topk=20)
    assert plan.recent == 128 - 16 - 40
    plan = BudgetPlan.for_sage(128, 2, sink=16, recent=32)
    assert plan.topk == 40


def test_plan_rejects_broken_identity():
    with pytest.raises(InvalidPlan):
        BudgetPlan.for_sage(128, 2, sink=16, topk=20, recent=1)
    with pytest.raises(InvalidPlan):
        BudgetPlan.for_sage(128, 2, sink=100, topk=40)


def test_plan_outside_recommended_range_is_accepted_with_warning(caplog):
    plan = BudgetPlan.for_sage(128, 1, sink=2, topk=8)
    assert plan.recent == 118
    assert any("recommended" in r.message for r in caplog.records)


def test_streamllm_plan():
    plan = BudgetPlan.for_streamllm(5, 2)
    assert (plan.sink, plan.topk, plan.recent) == (2, 0, 3)
    with pytest.raises(InvalidPlan):
        BudgetPlan.for_streamllm(4, 4)


def test_reduced_length_example():
    assert BudgetPlan(8192, 2048, 1024, 2048).reduced_length() == 5121


# ---------------- partition_cache ---------------- #

def test_partition_example(tiny_model, rng):
    seg = partition_cache(make_full(tiny_model, 10, rng), sink=2, recent=3)
    head = seg.head(0, 0)
    assert head.sink.positions.tolist() == [0, 1]
    assert head.evictable.positions.tolist() == [2, 3, 4, 5]
    assert head.recent.positions.tolist() == [6, 7, 8]
    assert head.last.position == 9
    assert seg.total_len == 10


def test_minimal_partition(tiny_model, rng):
    seg = partition_cache(make_full(tiny_model, 4, rng), sink=1, recent=1)
    assert (seg.sink_len, seg.evictable_len, seg.recent_len) == (1, 1, 1)


def test_partition_without_evictable_region(tiny_model, rng):
    with pytest.raises(BudgetTooLarge):
        partition_cache(make_full(tiny_model, 10, rng), sink=5, recent=4)


def test_partition_preserves_content(model, rng):
    full = make_full(model, 20, rng)
    seg = partition_cache(full, sink=3, recent=4)
    for layer in range(model.layers):
        for kv in range(model.kv_heads):
            joined = seg.head(layer, kv).concat()
            np.testing.assert_array_equal(joined.keys, full.segment(layer, kv).keys)
            assert np.all(np.diff(joined.positions) > 0)


# ---------------- build_reduced ---------------- #

def test_reduced_visible_length(tiny_model, rng):
    seg = partition_cache(make_full(tiny_model, 10, rng), sink=2, recent=3)
    reduced = build_reduced(seg, [[[2]]])
    assert reduced.visible_length(0, 0) == 7
    assert reduced.view(0, 0).positions.tolist() == [0, 1, 4, 6, 7, 8, 9]


def test_selecting_everything_reproduces_full(model, rng):
    full = make_full(model, 12, rng)
    seg = partition_cache(full, sink=2, recent=3)
    e = seg.evictable_len
    reduced = build_reduced(seg, [[list(range(e))] * model.q_heads] * model.layers)
    for layer in range(model.layers):
        for head in range(model.q_heads):
            got = reduced.view(layer, head)
            want = full.view(layer, head)
            np.testing.assert_array_equal(got.keys, want.keys)
            np.testing.assert_array_equal(got.positions, want.positions)


def test_selections_are_sorted(tiny_model, rng):
    seg = partition_cache(make_full(tiny_model, 10, rng), sink=2, recent=3)
    reduced = build_reduced(seg, [[[3, 0]]])
    assert reduced.topk[0][0].positions.tolist() == [2, 5]


@pytest.mark.parametrize(
    "selections",
    [
        [[[0, 0]]],  # duplicate
        [[[4]]],  # outside E
        [[[-1]]],
        [[]],  # missing head
    ],
)
def test_invalid_selection(tiny_model, rng, selections):
    seg = partition_cache(make_full(tiny_model, 10, rng), sink=2, recent=3)
    with pytest.raises(InvalidSelection):
        build_reduced(seg, selections)


def test_unequal_selection_lengths(model, rng):
    seg = partition_cache(make_full(model, 12, rng), sink=2, recent=3)
    selections = [[[0], [1], [2], [3]], [[0], [1], [2, 3], [4]]]
    with pytest.raises(InvalidSelection):
        build_reduced(seg, selections)


def test_retained_entries_count_shared_parts_once(model, rng):
    seg = partition_cache(make_full(model, 20, rng), sink=3, recent=4)
    k = 2
    reduced = build_reduced(seg, [[[0, 5]] * model.q_heads] * model.layers)
    expected = model.kv_heads * (3 + 4 + 1) + model.q_heads * k
    assert reduced.retained_entries(0) == expected


# ---------------- fifo_push ---------------- #

def _reduced_for_fifo(tiny_model, rng, recent=3):
    seg = partition_cache(make_full(tiny_model, 10, rng), sink=2, recent=recent)
    return build_reduced(seg, [[[0]]])


def test_fifo_push_example(tiny_model, rng):
    cache = _reduced_for_fifo(tiny_model, rng)
    fifo_push(cache, make_token(10))
    assert cache.recent[0][0].positions.tolist() == [7, 8, 9]
    assert cache.last[0][0].position == 10


def test_fifo_push_capacity_one(tiny_model, rng):
    cache = _reduced_for_fifo(tiny_model, rng, recent=1)
    fifo_push(cache, make_token(10))
    assert cache.recent[0][0].positions.tolist() == [9]
    assert cache.last[0][0].position == 10


def test_fifo_push_twice(tiny_model, rng):
    cache = _reduced_for_fifo(tiny_model, rng)
    fifo_push(cache, make_token(10))
    fifo_push(cache, make_token(11))
    assert cache.recent[0][0].positions.tolist() == [8, 9, 10]
    assert cache.last[0][0].position == 11
    assert cache.visible_length(0, 0) == 2 + 1 + 3 + 1


def test_fifo_push_rejects_gap(tiny_model, rng):
    cache = _reduced_for_fifo(tiny_model, rng)
    with pytest.raises(InvalidPosition):
        fifo_push(cache, make_token(12))


def test_full_cache_push(tiny_model, rng):
    full = make_full(tiny_model, 5, rng)
    full.push(0, 0, make_token(5))
    assert full.length == 6
    with pytest.raises(InvalidPosition):
        full.push(0, 0, make_token(9))


def test_segment_digest_tracks_content():
    seg = KvSegment(np.eye(2), np.eye(2), np.array([0, 1]))
    same = KvSegment(np.eye(2), np.eye(2), np.array([0, 1]))
    other = KvSegment(np.eye(2), np.eye(2), np.array([0, 2]))
    assert seg.content_digest() == same.content_digest()
    assert seg.content_digest() != other.content_digest()
