import numpy as np
import pytest

from analysis import (
    IndexKind,
    IndexSet,
    analyze_trace,
    boxplot_summary,
    cross_layer_metrics,
    index_frequency,
    layer_union,
    overlap_metrics,
    pie_buckets,
    top_k_index_set,
    top_k_sum,
    top_p_indices,
    visible_length,
    within_layer_metrics,
)
from errors import EmptyInput, InvalidSelection, KTooLarge
from trace_io import AttentionTrace


def _set(indices, layer=0, head=0, kind=IndexKind.TOP_P, param=0.9):
    return IndexSet(layer, head, kind, param, frozenset(indices))


# ---------------- Selections ---------------- #

def test_top_k_sum_example():
    assert top_k_sum([0.5, 0.3, 0.2], 2) == pytest.approx(0.8)
    assert top_k_sum([0.5, 0.3, 0.2], 0) == 0.0
    with pytest.raises(KTooLarge):
        top_k_sum([0.5, 0.3, 0.2], 4)


@pytest.mark.parametrize(
    "p, expected",
    [
        (0.5, {0}),
        (0.75, {0, 1}),
        (0.8, {0, 1}),
        (0.99, {0, 1, 2}),
    ],
)
def test_top_p_prefix(p, expected):
    assert top_p_indices([0.5, 0.3, 0.2], p).indices == expected


def test_top_p_full_mass_selects_support():
    assert top_p_indices([0.5, 0.0, 0.5, 0.0], 1.0).indices == {0, 2}


def test_top_p_ties_prefer_lower_index():
    assert top_p_indices([0.25, 0.25, 0.25, 0.25], 0.5).indices == {0, 1}


@pytest.mark.parametrize("p", [0.0, -0.1, 1.5])
def test_top_p_rejects_threshold(p):
    with pytest.raises(InvalidSelection):
        top_p_indices([0.5, 0.5], p)


def test_top_k_index_set():
    s = top_k_index_set([0.1, 0.4, 0.4, 0.1], 2, layer=1, head=3)
    assert s.indices == {1, 2}
    assert (s.layer, s.head, s.kind) == (1, 3, IndexKind.TOP_K)


def test_top_k_sum_nondecreasing_in_k(rng):
    scores = rng.dirichlet(np.ones(64))
    sums = [top_k_sum(scores, k) for k in range(65)]
    assert np.all(np.diff(sums) >= 0)
    assert sums[-1] == pytest.approx(1.0, abs=1e-6)


def test_top_p_is_minimal(rng):
    for _ in range(200):
        scores = rng.dirichlet(np.full(int(rng.integers(2, 64)), 0.3))
        p = float(rng.uniform(0.05, 0.99))
        chosen = sorted(top_p_indices(scores, p).indices)
        mass = scores[chosen].sum()
        assert mass >= p - 1e-12
        lowest = min(chosen, key=lambda i: scores[i])
        assert mass - scores[lowest] < p


# ---------------- Set metrics ---------------- #

def test_within_layer_example():
    j, rc = within_layer_metrics([_set({1, 2, 3}), _set({2, 3, 4}, head=1)], n=8)
    assert j == pytest.approx(0.5)
    assert rc == pytest.approx(0.5)


def test_within_layer_rejects_mixed_inputs():
    with pytest.raises(InvalidSelection):
        within_layer_metrics([_set({1}), _set({1}, layer=1)], n=4)
    with pytest.raises(InvalidSelection):
        within_layer_metrics([_set({1}), _set({1}, kind=IndexKind.TOP_K, param=2)], n=4)


def test_empty_union_reports_zero_with_warning():
    warnings = []
    j, rc = within_layer_metrics([_set(set()), _set(set(), head=1)], n=4, warnings=warnings)
    assert (j, rc) == (0.0, 0.0)
    assert len(warnings) == 1


def test_cross_layer_example():
    j, rc = cross_layer_metrics([frozenset({1, 2}), frozenset({2, 3})], n=4)
    assert j == pytest.approx(1 / 3)
    assert rc == pytest.approx(0.75)


def test_index_frequency():
    sets = [_set({0, 2}), _set({0}), _set({0, 1}), _set({3})]
    np.testing.assert_allclose(index_frequency(sets, 4), [0.75, 0.25, 0.25, 0.25])


def test_overlap_example():
    r_adj, r_f2l = overlap_metrics([_set({1, 2, 3}), _set({2, 3, 4, 5}), _set({1, 2})])
    assert r_adj == pytest.approx([0.5, 0.5])
    assert r_f2l == pytest.approx([0.5, 1.0])


def test_overlap_needs_two_steps():
    with pytest.raises(EmptyInput):
        overlap_metrics([_set({1})])


def test_set_metrics_depend_only_on_ranking(rng):
    n = 40
    scores = rng.dirichlet(np.ones(n), size=(2, 4))
    # strictly increasing on [0, 1]
    warped = np.exp(5 * scores) + scores ** 3
    for k in (1, 5, 12):
        plain = [[top_k_index_set(scores[l, h], k, l, h) for h in range(4)] for l in range(2)]
        other = [[top_k_index_set(warped[l, h], k, l, h) for h in range(4)] for l in range(2)]
        for a, b in zip(plain, other):
            assert [s.indices for s in a] == [s.indices for s in b]
            assert within_layer_metrics(a, n) == within_layer_metrics(b, n)
        assert cross_layer_metrics([layer_union(s) for s in plain], n) == cross_layer_metrics(
            [layer_union(s) for s in other], n
        )
        np.testing.assert_array_equal(
            index_frequency([s for row in plain for s in row], n),
            index_frequency([s for row in other for s in row], n),
        )


# ---------------- Distributions ---------------- #

def test_pie_buckets_are_right_closed():
    counts = pie_buckets([0.5, 0.51, 0.8, 0.85, 0.9, 0.95, 1.0])
    assert counts.tolist() == [1, 2, 2, 2]


def test_boxplot_summary():
    frame = boxplot_summary([np.array([1.0, 2.0, 3.0, 4.0, 5.0])])
    row = frame.iloc[0]
    assert list(frame.columns) == ["layer", "min", "q1", "median", "q3", "max", "mean"]
    assert (row["min"], row["q1"], row["median"], row["q3"], row["max"], row["mean"]) == (1, 2, 3, 4, 5, 3)


def test_visible_length_ignores_padding():
    rows = np.array([[0.5, 0.5, 0.0, 0.0], [0.2, 0.3, 0.5, 0.0]])
    assert visible_length(rows) == 3


# ---------------- analyze_trace ---------------- #

@pytest.fixture
def trace():
    scores = np.zeros((1, 2, 2, 4), dtype=np.float32)
    scores[0, 0, 0, :3] = [0.5, 0.3, 0.2]
    scores[0, 1, 0, :3] = [0.1, 0.6, 0.3]
    scores[0, 0, 1] = [0.4, 0.4, 0.1, 0.1]
    scores[0, 1, 1] = [0.25, 0.25, 0.25, 0.25]
    return AttentionTrace(scores)


def test_analyze_trace_last_step(trace):
    report = analyze_trace(trace, k_list=[2], p_list=[0.5])
    assert (report.step, report.visible) == (1, 4)
    np.testing.assert_allclose(report.topk_sums[2], [[0.8, 0.5]], atol=1e-6)

    j, rc = report.layer_metrics[("top_k", 2.0)][0]
    assert (j, rc) == pytest.approx((1.0, 0.5))
    np.testing.assert_allclose(report.frequency[0.5], [1.0, 1.0, 0.0, 0.0])
    assert report.r_adj[0.5] == pytest.approx([0.5])
    assert report.r_f2l[0.5] == pytest.approx([0.5])


def test_analyze_trace_earlier_step_uses_its_visible_length(trace):
    report = analyze_trace(trace, k_list=[1], p_list=[0.9], step=0)
    assert report.visible == 3
    np.testing.assert_allclose(report.topk_sums[1], [[0.5, 0.6]], atol=1e-6)


def test_analyze_trace_clamps_k(trace):
    report = analyze_trace(trace, k_list=[8], p_list=[])
    np.testing.assert_allclose(report.topk_sums[8], [[1.0, 1.0]], atol=1e-6)
    assert any("clamped" in w for w in report.warnings)


def test_report_tables(trace):
    report = analyze_trace(trace, k_list=[2], p_list=[0.5])
    assert list(report.heatmap_table().columns) == ["k", "layer", "head_0", "head_1"]
    assert report.pie_table()["count"].sum() == 2
    assert list(report.overlap_table().columns) == ["p", "step", "r_adj", "r_f2l"]
    assert len(report.boxplot_table()) == 1
    assert report.to_dict()["shape"] == {"layers": 1, "heads": 2, "steps": 2}


def test_single_step_trace_has_no_overlap():
    scores = np.zeros((1, 1, 1, 3), dtype=np.float32)
    scores[0, 0, 0] = [0.2, 0.3, 0.5]
    report = analyze_trace(AttentionTrace(scores), k_list=[1], p_list=[0.9])
    assert report.r_adj == {}
