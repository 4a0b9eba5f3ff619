"""Shared fixtures: small model shapes, seeded generators, cache builders"""

import numpy as np
import pytest

from attention import QkvSequence
from kv_cache import FullKvCache, ModelConfig, TokenKv


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def model():
    # G = 2
    return ModelConfig(layers=2, q_heads=4, kv_heads=2, head_dim=8)


@pytest.fixture
def tiny_model():
    return ModelConfig(layers=1, q_heads=1, kv_heads=1, head_dim=4)


def make_full(model: ModelConfig, n: int, rng, pre_rope: bool = False) -> FullKvCache:
    keys = rng.standard_normal((model.layers, n, model.kv_heads, model.head_dim))
    values = rng.standard_normal((model.layers, n, model.kv_heads, model.head_dim))
    return FullKvCache.from_arrays(model, keys, values, pre_rope)


def make_sequence(model: ModelConfig, n: int, rng) -> QkvSequence:
    return QkvSequence(
        rng.standard_normal((model.layers, n, model.q_heads, model.head_dim)),
        rng.standard_normal((model.layers, n, model.kv_heads, model.head_dim)),
        rng.standard_normal((model.layers, n, model.kv_heads, model.head_dim)),
    )


def make_token(position: int, head_dim: int = 4, pre_rope: bool = False) -> TokenKv:
    return TokenKv(np.full(head_dim, float(position)), np.full(head_dim, -float(position)), position, pre_rope)
