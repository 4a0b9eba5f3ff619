"""
KV Cache
Domain types plus the partition / concatenation mechanics of the eviction engine:
full cache -> sink | evictable | recent | last -> reduced cache with a FIFO recent window
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import List, Optional, Protocol, Sequence

import numpy as np

from config import ROPE_BASE
from errors import (
    BudgetTooLarge,
    InvalidModelConfig,
    InvalidPlan,
    InvalidPosition,
    InvalidSelection,
    OddHeadDim,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)


# ============================================================================
# Model shape
# ============================================================================

@dataclass(frozen=True)
class ModelConfig:
    """Decoder shape: L layers, H_q query heads sharing H_kv KV heads of dim d_h"""

    layers: int
    q_heads: int
    kv_heads: int
    head_dim: int
    rope_base: float = ROPE_BASE

    def __post_init__(self):
        for name in ("layers", "q_heads", "kv_heads", "head_dim"):
            if getattr(self, name) < 1:
                raise InvalidModelConfig(f"{name} must be positive, got {getattr(self, name)}")
        if self.q_heads % self.kv_heads != 0:
            raise InvalidModelConfig(
                f"q_heads ({self.q_heads}) must be a multiple of kv_heads ({self.kv_heads})"
            )
        if self.head_dim % 2 != 0:
            raise OddHeadDim(f"head_dim must be even for rotary rotation, got {self.head_dim}")
        if self.rope_base <= 0:
            raise InvalidModelConfig(f"rope_base must be positive, got {self.rope_base}")

    @property
    def group_size(self) -> int:
        return self.q_heads // self.kv_heads

    def kv_head_for(self, q_head: int) -> int:
        return q_head // self.group_size

    def q_heads_for(self, kv_head: int) -> range:
        g = self.group_size
        return range(kv_head * g, (kv_head + 1) * g)


# ============================================================================
# Entries and segments
# ============================================================================

@dataclass(frozen=True, eq=False)
class TokenKv:
    """One token's key/value pair for one (layer, kv_head)"""

    key: np.ndarray
    value: np.ndarray
    position: int
    pre_rope: bool = False

    def __post_init__(self):
        if self.key.ndim != 1 or self.key.shape != self.value.shape:
            raise ShapeMismatch(
                f"key {self.key.shape} and value {self.value.shape} must be equal-length vectors"
            )


@dataclass(frozen=True, eq=False)
class KvSegment:
    """
    Ordered run of cache entries stored column-wise.

    keys/values are (n, d_h), positions (n,) absolute 0-based token indices.
    pre_rope tells whether keys are un-rotated (rotated at attention time).
    """

    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray
    pre_rope: bool = False

    def __post_init__(self):
        if self.keys.shape != self.values.shape or self.keys.ndim != 2:
            raise ShapeMismatch(f"keys {self.keys.shape} / values {self.values.shape} mismatch")
        if self.positions.shape != (self.keys.shape[0],):
            raise ShapeMismatch(
                f"positions {self.positions.shape} do not match {self.keys.shape[0]} entries"
            )

    @classmethod
    def empty(cls, head_dim: int, pre_rope: bool = False) -> "KvSegment":
        return cls(
            np.zeros((0, head_dim)),
            np.zeros((0, head_dim)),
            np.zeros(0, dtype=np.int64),
            pre_rope,
        )

    @classmethod
    def from_tokens(cls, tokens: Sequence[TokenKv], head_dim: int) -> "KvSegment":
        if not tokens:
            return cls.empty(head_dim)
        flags = {t.pre_rope for t in tokens}
        if len(flags) != 1:
            raise ShapeMismatch("cannot mix pre-rotation and rotated keys in one segment")
        return cls(
            np.stack([t.key for t in tokens]),
            np.stack([t.value for t in tokens]),
            np.array([t.position for t in tokens], dtype=np.int64),
            flags.pop(),
        )

    @property
    def head_dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return self.keys.shape[0]

    def token(self, i: int) -> TokenKv:
        return TokenKv(self.keys[i], self.values[i], int(self.positions[i]), self.pre_rope)

    def slice(self, start: int, stop: int) -> "KvSegment":
        # copies so the source buffer can be released
        return KvSegment(
            self.keys[start:stop].copy(),
            self.values[start:stop].copy(),
            self.positions[start:stop].copy(),
            self.pre_rope,
        )

    def take(self, indices: Sequence[int]) -> "KvSegment":
        idx = np.asarray(indices, dtype=np.int64)
        return KvSegment(self.keys[idx], self.values[idx], self.positions[idx], self.pre_rope)

    def append(self, token: TokenKv) -> "KvSegment":
        return KvSegment.concat(self, KvSegment.from_tokens([token], self.head_dim))

    @staticmethod
    def concat(*segments: "KvSegment") -> "KvSegment":
        parts = [s for s in segments if len(s)]
        if not parts:
            return segments[0]
        flags = {s.pre_rope for s in parts}
        if len(flags) != 1:
            raise ShapeMismatch("cannot concatenate pre-rotation and rotated segments")
        return KvSegment(
            np.concatenate([s.keys for s in parts]),
            np.concatenate([s.values for s in parts]),
            np.concatenate([s.positions for s in parts]),
            flags.pop(),
        )

    def content_digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.keys).tobytes())
        h.update(np.ascontiguousarray(self.values).tobytes())
        h.update(np.ascontiguousarray(self.positions).tobytes())
        return h.hexdigest()


class KvCacheView(Protocol):
    """Anything attention can read: the ordered entries one query head sees"""

    def view(self, layer: int, q_head: int) -> KvSegment: ...


# ============================================================================
# Budget plan
# ============================================================================

def _floor_pow2(x: int) -> int:
    return 1 << (x.bit_length() - 1) if x >= 1 else 0


@dataclass(frozen=True)
class BudgetPlan:
    """Token budget B split into sink S, per-query-head top-k, and recent R"""

    budget: int
    sink: int
    topk: int
    recent: int

    def __post_init__(self):
        for name in ("budget", "sink", "topk", "recent"):
            if getattr(self, name) < 0:
                raise InvalidPlan(f"{name} must be >= 0, got {getattr(self, name)}")

    @classmethod
    def for_sage(
        cls,
        budget: int,
        group_size: int,
        sink: Optional[int] = None,
        topk: Optional[int] = None,
        recent: Optional[int] = None,
    ) -> "BudgetPlan":
        """
        Fill in missing components from the defaults (S = B/4, k = pow2 floor of B/(2G),
        R = remainder) and check S + G*k + R == B.
        """
        if budget < 1 or group_size < 1:
            raise InvalidPlan(f"budget and group size must be positive ({budget}, {group_size})")
        s = budget // 4 if sink is None else sink
        if topk is None:
            if recent is None:
                k = _floor_pow2(budget // (2 * group_size))
            else:
                k = (budget - s - recent) // group_size
        else:
            k = topk
        r = budget - s - group_size * k if recent is None else recent

        if min(s, k, r) < 0:
            raise InvalidPlan(f"plan S={s}, k={k}, R={r} has a negative component for B={budget}")
        if s + group_size * k + r != budget:
            raise InvalidPlan(
                f"S + G*k + R = {s} + {group_size}*{k} + {r} = {s + group_size * k + r} != B = {budget}"
            )
        if k < 1:
            raise InvalidPlan(f"SAGE needs k >= 1 (B={budget}, G={group_size})")

        plan = cls(budget, s, k, r)
        plan.warn_if_outside_recommended(group_size)
        return plan

    @classmethod
    def for_streamllm(cls, budget: int, sink: Optional[int] = None) -> "BudgetPlan":
        s = budget // 4 if sink is None else sink
        if s > budget or budget < 1:
            raise InvalidPlan(f"sink {s} does not fit budget {budget}")
        if budget - s < 1:
            raise InvalidPlan("StreamLLM needs at least the last token in its recent window")
        return cls(budget, s, 0, budget - s)

    def check_sage(self, group_size: int) -> None:
        if self.sink + group_size * self.topk + self.recent != self.budget or self.topk < 1:
            raise InvalidPlan(f"{self} is not a SAGE plan for G={group_size}")

    def reduced_length(self) -> int:
        """Per-query-head visible length after compression: S + k + R + 1"""
        return self.sink + self.topk + self.recent + 1

    def warn_if_outside_recommended(self, group_size: int) -> None:
        b = self.budget
        if not b / 8 <= self.sink <= b / 4:
            logger.warning("sink %d outside the recommended range [B/8, B/4] for B=%d", self.sink, b)
        if not b / (4 * group_size) <= self.topk <= b / (2 * group_size):
            logger.warning(
                "top-k %d outside the recommended range [B/4G, B/2G] for B=%d, G=%d",
                self.topk, b, group_size,
            )


def default_plan(budget: int, group_size: int) -> BudgetPlan:
    return BudgetPlan.for_sage(budget, group_size)


# ============================================================================
# Full cache (no eviction)
# ============================================================================

class FullKvCache:
    """Every token ever seen, per (layer, kv_head); grows by append"""

    def __init__(self, config: ModelConfig, segments: List[List[KvSegment]]):
        self.config = config
        self.segments = segments

    @classmethod
    def from_arrays(
        cls,
        config: ModelConfig,
        keys: np.ndarray,
        values: np.ndarray,
        pre_rope: bool = False,
    ) -> "FullKvCache":
        """keys/values shaped (L, N, H_kv, d_h)"""
        n = keys.shape[1]
        positions = np.arange(n, dtype=np.int64)
        segments = [
            [
                KvSegment(
                    np.ascontiguousarray(keys[layer, :, kv]),
                    np.ascontiguousarray(values[layer, :, kv]),
                    positions.copy(),
                    pre_rope,
                )
                for kv in range(config.kv_heads)
            ]
            for layer in range(config.layers)
        ]
        return cls(config, segments)

    @property
    def length(self) -> int:
        return len(self.segments[0][0])

    @property
    def pre_rope(self) -> bool:
        return self.segments[0][0].pre_rope

    def copy(self) -> "FullKvCache":
        # segments are immutable; copying the grid is enough
        return FullKvCache(self.config, [list(row) for row in self.segments])

    def segment(self, layer: int, kv_head: int) -> KvSegment:
        return self.segments[layer][kv_head]

    def view(self, layer: int, q_head: int) -> KvSegment:
        return self.segments[layer][self.config.kv_head_for(q_head)]

    def push(self, layer: int, kv_head: int, token: TokenKv) -> None:
        seg = self.segments[layer][kv_head]
        if len(seg) and token.position != int(seg.positions[-1]) + 1:
            raise InvalidPosition(
                f"token at {token.position} does not follow {int(seg.positions[-1])}"
            )
        self.segments[layer][kv_head] = seg.append(token)

    def retained_entries(self, layer: int) -> int:
        return sum(len(s) for s in self.segments[layer])


# ============================================================================
# Segmented cache
# ============================================================================

@dataclass(eq=False)
class SegmentedHead:
    sink: KvSegment
    evictable: KvSegment
    recent: KvSegment
    last: TokenKv

    def concat(self) -> KvSegment:
        return KvSegment.concat(
            self.sink,
            self.evictable,
            self.recent,
            KvSegment.from_tokens([self.last], self.sink.head_dim),
        )


class SegmentedKvCache:
    """Per (layer, kv_head): sink (S) | evictable (E) | recent (R) | last (1)"""

    def __init__(self, config: ModelConfig, heads: List[List[SegmentedHead]]):
        self.config = config
        self.heads = heads

    def head(self, layer: int, kv_head: int) -> SegmentedHead:
        return self.heads[layer][kv_head]

    @property
    def sink_len(self) -> int:
        return len(self.heads[0][0].sink)

    @property
    def evictable_len(self) -> int:
        return len(self.heads[0][0].evictable)

    @property
    def recent_len(self) -> int:
        return len(self.heads[0][0].recent)

    @property
    def total_len(self) -> int:
        return self.sink_len + self.evictable_len + self.recent_len + 1

    def view(self, layer: int, q_head: int) -> KvSegment:
        return self.heads[layer][self.config.kv_head_for(q_head)].concat()


def partition_cache(full: FullKvCache, sink: int, recent: int) -> SegmentedKvCache:
    """
    Split every (layer, kv_head) list into sink / evictable / recent / last

    Args:
        full: prefill cache of N entries per head
        sink: S leading entries always kept
        recent: R entries before the last token

    Returns:
        SegmentedKvCache with E = N - 1 - S - R evictable entries
    """
    n = full.length
    if sink < 0 or recent < 0:
        raise InvalidPlan(f"sink ({sink}) and recent ({recent}) must be >= 0")
    if sink + recent + 1 >= n:
        raise BudgetTooLarge(
            f"S + R + 1 = {sink + recent + 1} >= N = {n}: no evictable region"
        )
    e = n - 1 - sink - recent

    heads = []
    for layer_segments in full.segments:
        row = []
        for seg in layer_segments:
            row.append(
                SegmentedHead(
                    sink=seg.slice(0, sink),
                    evictable=seg.slice(sink, sink + e),
                    recent=seg.slice(sink + e, n - 1),
                    last=seg.slice(n - 1, n).token(0),
                )
            )
        heads.append(row)

    # positions quoted 1-based
    logger.debug(
        "partitioned N=%d: sink 1..%d, evictable %d..%d, recent %d..%d, last %d",
        n, sink, sink + 1, sink + e, sink + e + 1, n - 1, n,
    )
    return SegmentedKvCache(full.config, heads)


# ============================================================================
# Reduced cache
# ============================================================================

class ReducedKvCache:
    """
    Compressed cache.

    sink, recent and last are stored once per (layer, kv_head) and shared by the
    G query heads of the group; topk is per (layer, q_head). The recent window is a
    FIFO of fixed capacity.
    """

    def __init__(
        self,
        config: ModelConfig,
        sink: List[List[KvSegment]],
        recent: List[List[KvSegment]],
        last: List[List[TokenKv]],
        topk: List[List[KvSegment]],
        recent_capacity: int,
        selections: Optional[List[List[np.ndarray]]] = None,
    ):
        self.config = config
        self.sink = sink
        self.recent = recent
        self.last = last
        self.topk = topk
        self.recent_capacity = recent_capacity
        self.selections = selections

    @property
    def k(self) -> int:
        return len(self.topk[0][0])

    def view(self, layer: int, q_head: int) -> KvSegment:
        kv = self.config.kv_head_for(q_head)
        sink = self.sink[layer][kv]
        return KvSegment.concat(
            sink,
            self.topk[layer][q_head],
            self.recent[layer][kv],
            KvSegment.from_tokens([self.last[layer][kv]], sink.head_dim),
        )

    def visible_length(self, layer: int, q_head: int) -> int:
        kv = self.config.kv_head_for(q_head)
        return (
            len(self.sink[layer][kv])
            + len(self.topk[layer][q_head])
            + len(self.recent[layer][kv])
            + 1
        )

    def push(self, layer: int, kv_head: int, new: TokenKv) -> None:
        prev = self.last[layer][kv_head]
        if new.position != prev.position + 1:
            raise InvalidPosition(f"token at {new.position} does not follow {prev.position}")
        recent = self.recent[layer][kv_head].append(prev)
        if len(recent) > self.recent_capacity:
            recent = recent.slice(len(recent) - self.recent_capacity, len(recent))
        self.recent[layer][kv_head] = recent
        self.last[layer][kv_head] = new

    def retained_entries(self, layer: int) -> int:
        shared = sum(
            len(self.sink[layer][kv]) + len(self.recent[layer][kv]) + 1
            for kv in range(self.config.kv_heads)
        )
        return shared + sum(len(t) for t in self.topk[layer])

    def sink_digest(self, layer: int, kv_head: int) -> str:
        return self.sink[layer][kv_head].content_digest()

    def topk_digest(self, layer: int, q_head: int) -> str:
        return self.topk[layer][q_head].content_digest()


def build_reduced(
    seg: SegmentedKvCache, selections: Sequence[Sequence[Sequence[int]]]
) -> ReducedKvCache:
    """
    Concat(S, E_topk, R, last) per query head

    Args:
        seg: partitioned cache
        selections: [layer][q_head] index lists into the evictable segment

    Returns:
        ReducedKvCache whose recent FIFO capacity equals the partition's R
    """
    config = seg.config
    e = seg.evictable_len
    if len(selections) != config.layers or any(len(s) != config.q_heads for s in selections):
        raise InvalidSelection(
            f"selections must cover {config.layers} layers x {config.q_heads} query heads"
        )

    k = None
    topk: List[List[KvSegment]] = []
    kept: List[List[np.ndarray]] = []
    for layer in range(config.layers):
        row, kept_row = [], []
        for q_head in range(config.q_heads):
            idx = np.asarray(selections[layer][q_head], dtype=np.int64)
            if k is None:
                k = len(idx)
            if len(idx) != k:
                raise InvalidSelection(f"head ({layer}, {q_head}) selected {len(idx)} entries, expected {k}")
            if len(np.unique(idx)) != len(idx):
                raise InvalidSelection(f"duplicate index in selection for head ({layer}, {q_head})")
            if len(idx) and (idx.min() < 0 or idx.max() >= e):
                raise InvalidSelection(f"selection for head ({layer}, {q_head}) outside [0, {e})")
            idx = np.sort(idx)
            evictable = seg.head(layer, config.kv_head_for(q_head)).evictable
            row.append(evictable.take(idx))
            kept_row.append(idx)
        topk.append(row)
        kept.append(kept_row)

    sink = [[h.sink for h in row] for row in seg.heads]
    recent = [[h.recent for h in row] for row in seg.heads]
    last = [[h.last for h in row] for row in seg.heads]
    logger.debug("built reduced cache: S=%d k=%s R=%d", seg.sink_len, k, seg.recent_len)
    return ReducedKvCache(config, sink, recent, last, topk, seg.recent_len, kept)


def fifo_push(cache: ReducedKvCache, new: TokenKv, layer: int = 0, kv_head: int = 0) -> ReducedKvCache:
    """Previous last joins recent (oldest dropped past capacity R); new becomes last"""
    cache.push(layer, kv_head, new)
    return cache
