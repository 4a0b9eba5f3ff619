"""
Block-wise dynamic top-k (Quest / InfLLM style)
The evictable region stays resident as a pool of contiguous blocks; every decode step
each query head scores the block summaries and attends the best floor((B - S - R) / C)
blocks next to the sink and recent windows.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from attention import PrefillResult
from errors import EmptyBlock, InvalidPosition, ShapeMismatch
from kv_cache import KvSegment, ModelConfig, TokenKv, partition_cache
from policies.base import EvictionPolicy, PolicyState, Pooling
from policies.selection import top_k_indices
from rope import apply_rotation

logger = logging.getLogger(__name__)


# ---------------- Summaries ---------------- #

@dataclass(frozen=True, eq=False)
class BlockSummary:
    """MinMax keeps the elementwise min and max; Mean keeps the centroid"""

    pooling: Pooling
    min: Optional[np.ndarray] = None
    max: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None

    def score(self, q: np.ndarray) -> float:
        if self.pooling is Pooling.MINMAX:
            return float(np.maximum(q * self.min, q * self.max).sum())
        return float(q @ self.mean)


def block_summarize(block, pooling=Pooling.MINMAX) -> BlockSummary:
    """Summary of one block of keys (n, d_h)"""
    keys = np.asarray(block, dtype=np.float64)
    if keys.size == 0:
        raise EmptyBlock("cannot summarize an empty block")
    keys = keys.reshape(len(keys), -1)
    pooling = Pooling(pooling)
    if pooling is Pooling.MINMAX:
        return BlockSummary(pooling, min=keys.min(axis=0), max=keys.max(axis=0))
    return BlockSummary(pooling, mean=keys.mean(axis=0))


# ---------------- Pool ---------------- #

class BlockPool:
    """
    Candidate pool of one (layer, kv_head), split into contiguous blocks of C entries.

    Blocks are fixed once formed; only the last one may be short. Appended entries
    fill the short block first, then open a new one.
    """

    def __init__(self, segment: KvSegment, block_size: int, pooling=Pooling.MINMAX):
        if len(segment) == 0:
            raise EmptyBlock("block pool needs at least one entry")
        self.segment = segment
        self.block_size = block_size
        self.pooling = Pooling(pooling)
        self._summarize_all()

    def _summarize_all(self) -> None:
        keys = self.segment.keys
        starts = np.arange(0, len(keys), self.block_size)
        self.counts = np.diff(np.append(starts, len(keys))).astype(np.float64)
        self.mins = np.minimum.reduceat(keys, starts, axis=0)
        self.maxs = np.maximum.reduceat(keys, starts, axis=0)
        self.means = np.add.reduceat(keys, starts, axis=0) / self.counts[:, None]

    def __len__(self) -> int:
        return len(self.segment)

    @property
    def n_blocks(self) -> int:
        return len(self.counts)

    def block_bounds(self, block: int):
        start = block * self.block_size
        return start, min(start + self.block_size, len(self.segment))

    def summary(self, block: int) -> BlockSummary:
        if self.pooling is Pooling.MINMAX:
            return BlockSummary(self.pooling, min=self.mins[block], max=self.maxs[block])
        return BlockSummary(self.pooling, mean=self.means[block])

    def extend(self, token: TokenKv) -> None:
        key = np.asarray(token.key, dtype=np.float64)
        self.segment = self.segment.append(token)
        if (len(self.segment) - 1) % self.block_size == 0:
            self.counts = np.append(self.counts, 1.0)
            self.mins = np.vstack([self.mins, key])
            self.maxs = np.vstack([self.maxs, key])
            self.means = np.vstack([self.means, key])
            return
        c = self.counts[-1]
        self.mins[-1] = np.minimum(self.mins[-1], key)
        self.maxs[-1] = np.maximum(self.maxs[-1], key)
        self.means[-1] = (self.means[-1] * c + key) / (c + 1)
        self.counts[-1] = c + 1

    def scores(self, q: np.ndarray) -> np.ndarray:
        """Block scores for a rotated query; MinMax upper-bounds every q . key in the block"""
        if self.pooling is Pooling.MINMAX:
            return np.maximum(self.mins * q, self.maxs * q).sum(axis=1)
        return self.means @ q

    def gather(self, blocks) -> KvSegment:
        blocks = np.sort(np.asarray(blocks, dtype=np.int64))
        if len(blocks) == 0:
            return KvSegment.empty(self.segment.head_dim, self.segment.pre_rope)
        idx = np.concatenate([np.arange(*self.block_bounds(b)) for b in blocks])
        return self.segment.take(idx)


# ---------------- Cache ---------------- #

class BlockTopKCache:
    """sink | block pool | recent FIFO | last, per (layer, kv_head); nothing is released"""

    def __init__(
        self,
        config: ModelConfig,
        sink: List[List[KvSegment]],
        pools: List[List[BlockPool]],
        recent: List[List[KvSegment]],
        last: List[List[TokenKv]],
        recent_capacity: int,
        selected_blocks: int,
    ):
        self.config = config
        self.sink = sink
        self.pools = pools
        self.recent = recent
        self.last = last
        self.recent_capacity = recent_capacity
        self.selected_blocks = selected_blocks

    def push(self, layer: int, kv_head: int, new: TokenKv) -> None:
        prev = self.last[layer][kv_head]
        if new.position != prev.position + 1:
            raise InvalidPosition(f"token at {new.position} does not follow {prev.position}")
        recent = self.recent[layer][kv_head].append(prev)
        if len(recent) > self.recent_capacity:
            # oldest recent entry becomes a selection candidate
            self.pools[layer][kv_head].extend(recent.token(0))
            recent = recent.slice(1, len(recent))
        self.recent[layer][kv_head] = recent
        self.last[layer][kv_head] = new

    def retained_entries(self, layer: int) -> int:
        return sum(
            len(self.sink[layer][kv]) + len(self.pools[layer][kv]) + len(self.recent[layer][kv]) + 1
            for kv in range(self.config.kv_heads)
        )


@dataclass(eq=False)
class BlockTopKView:
    """Visible cache of one decode step; blocks[layer][q_head] are ascending block ids"""

    cache: BlockTopKCache
    blocks: List[List[np.ndarray]]

    def view(self, layer: int, q_head: int) -> KvSegment:
        c = self.cache
        kv = c.config.kv_head_for(q_head)
        sink = c.sink[layer][kv]
        return KvSegment.concat(
            sink,
            c.pools[layer][kv].gather(self.blocks[layer][q_head]),
            c.recent[layer][kv],
            KvSegment.from_tokens([c.last[layer][kv]], sink.head_dim),
        )


def block_topk_step(queries: np.ndarray, cache: BlockTopKCache, selected_blocks: Optional[int] = None) -> BlockTopKView:
    """
    Pick the best blocks for every query head at this decode step

    Args:
        queries: raw queries (L, H_q, d_h) of the newest token
        cache: block pool state
        selected_blocks: blocks per head (defaults to the cache's floor((B - S - R) / C))

    Returns:
        BlockTopKView: sink | selected blocks | recent | last
    """
    config = cache.config
    queries = np.asarray(queries, dtype=np.float64)
    if queries.shape != (config.layers, config.q_heads, config.head_dim):
        raise ShapeMismatch(f"queries {queries.shape} do not match {config}")
    m = cache.selected_blocks if selected_blocks is None else selected_blocks

    blocks = []
    for layer in range(config.layers):
        row = []
        for head in range(config.q_heads):
            kv = config.kv_head_for(head)
            pool = cache.pools[layer][kv]
            # the query sits at the last token's absolute position
            q_rot = apply_rotation(queries[layer, head], cache.last[layer][kv].position, config.rope_base)
            row.append(top_k_indices(pool.scores(q_rot), min(m, pool.n_blocks)))
        blocks.append(row)
    return BlockTopKView(cache, blocks)


# ---------------- Policy ---------------- #

class BlockTopKPolicy(EvictionPolicy):
    name = "block_topk"
    description = "Per-step block selection over the full resident pool"

    def compress(self, prefill: PrefillResult) -> PolicyState:
        self._check_prefill(prefill)
        plan = self.config.plan
        full = prefill.cache
        if plan.budget >= full.length:
            return self._no_eviction(prefill)

        seg = partition_cache(full, plan.sink, plan.recent)
        pools = [
            [BlockPool(h.evictable, self.config.block_size, self.config.pooling) for h in row]
            for row in seg.heads
        ]
        cache = BlockTopKCache(
            config=full.config,
            sink=[[h.sink for h in row] for row in seg.heads],
            pools=pools,
            recent=[[h.recent for h in row] for row in seg.heads],
            last=[[h.last for h in row] for row in seg.heads],
            recent_capacity=seg.recent_len,
            selected_blocks=self.config.selected_blocks,
        )
        logger.info(
            "block top-k: %d blocks of C=%d, %d selected per head, pooling=%s",
            pools[0][0].n_blocks, self.config.block_size, self.config.selected_blocks,
            self.config.pooling.value,
        )
        return PolicyState(cache=cache)

    def view_for(self, state: PolicyState, queries: np.ndarray):
        if not state.evicted:
            return state.cache
        return block_topk_step(queries, state.cache)
