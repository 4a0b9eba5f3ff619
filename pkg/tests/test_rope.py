import numpy as np
import pytest

from conftest import make_token
from errors import EmptyInput, OddHeadDim
from kv_cache import KvSegment
from rope import PositioningMode, apply_rotation, positions_for, rotate_batch, unrotate


def test_quarter_turn():
    out = apply_rotation(np.array([1.0, 0.0]), np.pi / 2)
    np.testing.assert_allclose(out, [0.0, 1.0], atol=1e-12)


def test_position_zero_is_identity(rng):
    v = rng.standard_normal(8)
    np.testing.assert_allclose(apply_rotation(v, 0), v)


def test_rotation_preserves_norm(rng):
    v = rng.standard_normal(16)
    assert np.linalg.norm(apply_rotation(v, 1234)) == pytest.approx(np.linalg.norm(v))


def test_unrotate_inverts(rng):
    v = rng.standard_normal(8)
    np.testing.assert_allclose(unrotate(apply_rotation(v, 77), 77), v, atol=1e-12)


def test_unrotate_rows(rng):
    vectors = rng.standard_normal((6, 8))
    positions = np.arange(6) * 100
    np.testing.assert_allclose(unrotate(rotate_batch(vectors, positions), positions), vectors, atol=1e-12)



def test_odd_dimension_rejected():
    with pytest.raises(OddHeadDim):
        apply_rotation(np.ones(3), 1)


def test_batch_matches_single(rng):
    vectors = rng.standard_normal((5, 8))
    positions = [0, 3, 10, 200, 4095]
    batch = rotate_batch(vectors, positions)
    for row, pos, got in zip(vectors, positions, batch):
        np.testing.assert_allclose(got, apply_rotation(row, pos))


def test_dot_product_depends_only_on_offset(rng):
    for _ in range(1000):
        q, k = rng.standard_normal(8), rng.standard_normal(8)
        m, n = rng.integers(0, 5000, size=2)
        shift = int(rng.integers(0, 5000))
        a = apply_rotation(q, m) @ apply_rotation(k, n)
        b = apply_rotation(q, m + shift) @ apply_rotation(k, n + shift)
        assert a == pytest.approx(b, rel=1e-6, abs=1e-6)


def test_positions_for_window_relative():
    seg = KvSegment.from_tokens([make_token(p) for p in (0, 1, 500, 501)], 4)
    assert positions_for(seg, PositioningMode.WINDOW_RELATIVE).tolist() == [0, 1, 2, 3]
    assert positions_for(seg, PositioningMode.ABSOLUTE).tolist() == [0, 1, 500, 501]


def test_positions_for_token_list():
    tokens = [make_token(p) for p in (4, 9)]
    assert positions_for(tokens, "absolute").tolist() == [4, 9]


def test_positions_for_empty_view():
    with pytest.raises(EmptyInput):
        positions_for(KvSegment.empty(4), PositioningMode.ABSOLUTE)
