import numpy as np
import pytest

from conftest import make_sequence
from attention import build_full_cache, decode_attend, logits_for, prefill_full, softmax_stable
from errors import EmptyCache, EmptyInput, InvalidPositioning, SequenceTooShort, ShapeMismatch
from kv_cache import KvSegment, ModelConfig
from rope import PositioningMode


# ---------------- softmax ---------------- #

def test_softmax_example():
    np.testing.assert_allclose(softmax_stable([1.0, 2.0, 3.0]), [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_large_logits():
    np.testing.assert_allclose(softmax_stable([1000.0, 999.0]), [0.7311, 0.2689], atol=1e-4)


def test_softmax_empty():
    with pytest.raises(EmptyInput):
        softmax_stable([])


def test_softmax_handles_masked_entries():
    out = softmax_stable([0.0, -np.inf])
    np.testing.assert_allclose(out, [1.0, 0.0])


# ---------------- decode ---------------- #

def _identity_view():
    return KvSegment(np.eye(2), np.eye(2), np.array([0, 0]))


class _Single:
    def __init__(self, seg):
        self.seg = seg

    def view(self, layer, q_head):
        return self.seg


def test_decode_example():
    config = ModelConfig(layers=1, q_heads=1, kv_heads=1, head_dim=2)
    step = decode_attend(np.array([[[1.0, 0.0]]]), _Single(_identity_view()), PositioningMode.ABSOLUTE, config)
    np.testing.assert_allclose(step.scores[0][0], [0.6698, 0.3302], atol=1e-4)
    np.testing.assert_allclose(step.outputs[0, 0], [0.6698, 0.3302], atol=1e-4)
    assert step.positions[0][0].tolist() == [0, 0]


def test_decode_rejects_bad_query_shape():
    config = ModelConfig(layers=1, q_heads=1, kv_heads=1, head_dim=2)
    with pytest.raises(ShapeMismatch):
        decode_attend(np.zeros((1, 2, 2)), _Single(_identity_view()), PositioningMode.ABSOLUTE, config)


def test_decode_empty_view():
    config = ModelConfig(layers=1, q_heads=1, kv_heads=1, head_dim=2)
    with pytest.raises(EmptyCache):
        decode_attend(np.zeros((1, 1, 2)), _Single(KvSegment.empty(2)), PositioningMode.ABSOLUTE, config)


def test_window_relative_needs_pre_rotation_keys():
    with pytest.raises(InvalidPositioning):
        logits_for(np.ones(2), _identity_view(), PositioningMode.WINDOW_RELATIVE, 10000.0)


def test_rows_sum_to_one(model, rng):
    seq = make_sequence(model, 30, rng)
    cache = build_full_cache(seq, model)
    step = decode_attend(seq.queries_at(29), cache, PositioningMode.ABSOLUTE, model)
    for layer in range(model.layers):
        for head in range(model.q_heads):
            row = step.scores[layer][head]
            assert row.sum() == pytest.approx(1.0, abs=1e-9)
            assert np.all(row >= 0)


def test_query_heads_share_their_kv_head(rng):
    config = ModelConfig(layers=1, q_heads=2, kv_heads=1, head_dim=4)
    seq = make_sequence(config, 12, rng)
    q = np.repeat(seq.queries_at(11)[:, :1], 2, axis=1)
    step = decode_attend(q, build_full_cache(seq, config), PositioningMode.ABSOLUTE, config)
    np.testing.assert_allclose(step.scores[0][0], step.scores[0][1])


def test_pre_rotation_absolute_matches_rotated(model, rng):
    seq = make_sequence(model, 16, rng)
    q = seq.queries_at(15)
    rotated = decode_attend(q, build_full_cache(seq, model), PositioningMode.ABSOLUTE, model)
    raw = decode_attend(q, build_full_cache(seq, model, pre_rope=True), PositioningMode.ABSOLUTE, model)
    np.testing.assert_allclose(rotated.outputs, raw.outputs, atol=1e-10)


# ---------------- prefill ---------------- #

def test_prefill_last_row_matches_decode(model, rng):
    seq = make_sequence(model, 40, rng)
    result = prefill_full(seq, model, chunk=7)
    step = decode_attend(seq.queries_at(39), result.cache, PositioningMode.ABSOLUTE, model)
    for layer in range(model.layers):
        for head in range(model.q_heads):
            np.testing.assert_allclose(result.last_row_scores[layer, head], step.scores[layer][head], atol=1e-10)
            np.testing.assert_allclose(result.outputs[layer, head, -1], step.outputs[layer, head], atol=1e-10)


def test_prefill_chunking_is_invisible(model, rng):
    seq = make_sequence(model, 33, rng)
    a = prefill_full(seq, model, chunk=4)
    b = prefill_full(seq, model, chunk=64)
    np.testing.assert_allclose(a.outputs, b.outputs, atol=1e-12)


def test_prefill_trace_is_causal(tiny_model, rng):
    seq = make_sequence(tiny_model, 6, rng)
    trace = prefill_full(seq, tiny_model, trace=True).trace
    assert trace.scores.shape == (1, 1, 6, 6)
    rows = trace.scores[0, 0]
    assert np.all(np.triu(rows, k=1) == 0)
    np.testing.assert_allclose(rows.sum(axis=1), np.ones(6), atol=1e-6)
    assert rows[0, 0] == pytest.approx(1.0)


def test_prefill_needs_two_tokens(tiny_model, rng):
    with pytest.raises(SequenceTooShort):
        prefill_full(make_sequence(tiny_model, 1, rng), tiny_model)
