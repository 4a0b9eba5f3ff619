"""
Attention
GQA scaled-dot-product attention for prefill and decode. Produces the outputs and the
score rows that drive SAGE selection and the sparsity analysis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from config import PREFILL_CHUNK
from errors import EmptyCache, EmptyInput, InvalidPositioning, SequenceTooShort, ShapeMismatch
from kv_cache import FullKvCache, KvCacheView, KvSegment, ModelConfig, TokenKv
from rope import PositioningMode, apply_rotation, positions_for, rotate_batch
from trace_io import AttentionTrace

logger = logging.getLogger(__name__)


# ============================================================================
# Types
# ============================================================================

@dataclass(frozen=True, eq=False)
class QkvSequence:
    """
    Harness-supplied per-token projections, un-rotated.

    queries (L, N, H_q, d_h); keys and values (L, N, H_kv, d_h).
    """

    queries: np.ndarray
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if self.keys.shape != self.values.shape:
            raise ShapeMismatch(f"keys {self.keys.shape} != values {self.values.shape}")
        if self.queries.shape[:2] != self.keys.shape[:2] or self.queries.shape[3] != self.keys.shape[3]:
            raise ShapeMismatch(f"queries {self.queries.shape} do not line up with keys {self.keys.shape}")

    @property
    def length(self) -> int:
        return self.queries.shape[1]

    def prefix(self, n: int) -> "QkvSequence":
        return QkvSequence(self.queries[:, :n], self.keys[:, :n], self.values[:, :n])

    def queries_at(self, index: int) -> np.ndarray:
        """(L, H_q, d_h) queries of one token"""
        return self.queries[:, index]

    def token_grid(self, index: int, config: ModelConfig, pre_rope: bool = False) -> List[List[TokenKv]]:
        """[layer][kv_head] entries of one token, keys rotated at `index` unless pre_rope"""
        grid = []
        for layer in range(config.layers):
            row = []
            for kv in range(config.kv_heads):
                key = self.keys[layer, index, kv]
                if not pre_rope:
                    key = apply_rotation(key, index, config.rope_base)
                value = np.asarray(self.values[layer, index, kv], dtype=np.float64)
                row.append(TokenKv(np.asarray(key, dtype=np.float64), value, index, pre_rope))
            grid.append(row)
        return grid


@dataclass(eq=False)
class AttentionStep:
    """Scores, attended positions and outputs for every (layer, query head)"""

    scores: List[List[np.ndarray]]
    positions: List[List[np.ndarray]]
    outputs: np.ndarray  # (L, H_q, d_h)


@dataclass(eq=False)
class PrefillResult:
    cache: FullKvCache
    last_row_scores: np.ndarray  # (L, H_q, N)
    outputs: np.ndarray  # (L, H_q, N, d_h)
    trace: Optional[AttentionTrace] = None


# ============================================================================
# Kernels
# ============================================================================

def softmax_stable(logits) -> np.ndarray:
    """Max-subtracted softmax over the last axis"""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.size == 0 or arr.shape[-1] == 0:
        raise EmptyInput("softmax of an empty vector")
    shifted = arr - arr.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _rotated_keys(view: KvSegment, mode: PositioningMode, base: float) -> np.ndarray:
    if view.pre_rope:
        return rotate_batch(view.keys, positions_for(view, mode), base)
    if PositioningMode(mode) is not PositioningMode.ABSOLUTE:
        raise InvalidPositioning("window-relative positioning needs keys stored before rotation")
    return view.keys


def logits_for(query: np.ndarray, view: KvSegment, mode: PositioningMode, base: float) -> np.ndarray:
    """
    Scaled logits of one raw query over a view.

    The query is the newest token, so it sits at the view's final position.
    """
    if len(view) == 0:
        raise EmptyCache("attention over an empty cache view")
    positions = positions_for(view, mode)
    keys = _rotated_keys(view, mode, base)
    q_rot = apply_rotation(query, positions[-1], base)
    return keys @ q_rot / np.sqrt(view.head_dim)


def attend_head(query: np.ndarray, view: KvSegment, mode: PositioningMode, base: float):
    scores = softmax_stable(logits_for(query, view, mode, base))
    return scores, scores @ view.values


def decode_attend(
    q: np.ndarray, cache: KvCacheView, mode: PositioningMode, config: ModelConfig
) -> AttentionStep:
    """
    One decode step for every (layer, query head)

    Args:
        q: raw queries (L, H_q, d_h); query head h reads KV head h // G
        cache: any cache exposing view(layer, q_head)
        mode: positioning used to rotate keys stored before rotation

    Returns:
        AttentionStep with probability rows over each head's visible entries
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (config.layers, config.q_heads, config.head_dim):
        raise ShapeMismatch(f"queries {q.shape} do not match {config}")

    scores, positions = [], []
    outputs = np.zeros_like(q)
    for layer in range(config.layers):
        s_row, p_row = [], []
        for head in range(config.q_heads):
            view = cache.view(layer, head)
            s, out = attend_head(q[layer, head], view, mode, config.rope_base)
            s_row.append(s)
            p_row.append(view.positions)
            outputs[layer, head] = out
        scores.append(s_row)
        positions.append(p_row)
    return AttentionStep(scores, positions, outputs)


# ============================================================================
# Prefill
# ============================================================================

def build_full_cache(seq: QkvSequence, config: ModelConfig, pre_rope: bool = False) -> FullKvCache:
    """Full cache of a prompt; keys rotated at their absolute positions unless pre_rope"""
    keys = np.array(seq.keys, dtype=np.float64)
    if not pre_rope:
        positions = np.arange(seq.length)
        for layer in range(config.layers):
            for kv in range(config.kv_heads):
                keys[layer, :, kv] = rotate_batch(keys[layer, :, kv], positions, config.rope_base)
    values = np.asarray(seq.values, dtype=np.float64)
    return FullKvCache.from_arrays(config, keys, values, pre_rope)


def prefill_full(
    seq: QkvSequence,
    config: ModelConfig,
    trace: bool = False,
    pre_rope: bool = False,
    chunk: int = PREFILL_CHUNK,
) -> PrefillResult:
    """
    Causal GQA attention over the whole prompt

    Args:
        seq: prompt projections of N tokens
        config: model shape
        trace: record every score row as an AttentionTrace (N steps x N positions)
        pre_rope: store keys un-rotated in the returned cache
        chunk: rows computed per block

    Returns:
        PrefillResult with the cache, last-row scores and per-position outputs
    """
    n = seq.length
    if n < 2:
        raise SequenceTooShort(f"prefill needs N >= 2, got {n}")
    if seq.queries.shape[2] != config.q_heads or seq.keys.shape[2] != config.kv_heads:
        raise ShapeMismatch(f"sequence heads do not match {config}")

    positions = np.arange(n)
    scale = 1.0 / np.sqrt(config.head_dim)
    last_rows = np.zeros((config.layers, config.q_heads, n))
    outputs = np.zeros((config.layers, config.q_heads, n, config.head_dim))
    rows = np.zeros((config.layers, config.q_heads, n, n), dtype=np.float32) if trace else None

    for layer in range(config.layers):
        k_rot = [
            rotate_batch(seq.keys[layer, :, kv], positions, config.rope_base)
            for kv in range(config.kv_heads)
        ]
        values = [
            np.asarray(seq.values[layer, :, kv], dtype=np.float64)
            for kv in range(config.kv_heads)
        ]
        for head in range(config.q_heads):
            kv = config.kv_head_for(head)
            q_rot = rotate_batch(seq.queries[layer, :, head], positions, config.rope_base)
            for start in range(0, n, chunk):
                stop = min(start + chunk, n)
                logits = q_rot[start:stop] @ k_rot[kv][:stop].T * scale
                # row i sees positions 0..i only
                causal = positions[None, :stop] > positions[start:stop, None]
                logits[causal] = -np.inf
                probs = softmax_stable(logits)
                outputs[layer, head, start:stop] = probs @ values[kv][:stop]
                if rows is not None:
                    rows[layer, head, start:stop, :stop] = probs
                if stop == n:
                    last_rows[layer, head] = probs[-1]

    logger.info("prefill done: N=%d, L=%d, H_q=%d, H_kv=%d", n, config.layers, config.q_heads, config.kv_heads)
    return PrefillResult(
        cache=build_full_cache(seq, config, pre_rope),
        last_row_scores=last_rows,
        outputs=outputs,
        trace=AttentionTrace(rows) if rows is not None else None,
    )
