"""
Workloads
Seeded synthetic q/k/v projections for the simulator: correlated Gaussian queries,
and the needle instance where one middle token carries almost all attention.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Union

import numpy as np

from attention import QkvSequence
from config import (
    DEFAULT_SEED,
    DEFAULT_SEQ_LEN,
    DEFAULT_STEPS,
    NEEDLE_DAMPING,
    NEEDLE_POSITION,
    NEEDLE_STRENGTH,
    QUERY_CORRELATION,
)
from errors import InvalidPlan, NeedleOutsideEvictable, SequenceTooShort
from kv_cache import ModelConfig
from policies.base import PolicyConfig, PolicyKind
from rope import unrotate

logger = logging.getLogger(__name__)


# ============================================================================
# Specs
# ============================================================================

@dataclass(frozen=True)
class Gaussian:
    query_correlation: float = QUERY_CORRELATION

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "gaussian", "query_correlation": self.query_correlation}


@dataclass(frozen=True)
class Needle:
    position: int = NEEDLE_POSITION
    strength: float = NEEDLE_STRENGTH
    damping: float = NEEDLE_DAMPING

    def __post_init__(self):
        if self.strength <= 0:
            raise InvalidPlan(f"needle strength must be > 0, got {self.strength}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": "needle",
            "position": self.position,
            "strength": self.strength,
            "damping": self.damping,
        }


Workload = Union[Gaussian, Needle]


@dataclass(frozen=True)
class SimSpec:
    """One simulated sequence: N prompt tokens then T decode tokens"""

    model: ModelConfig
    policy: PolicyConfig
    seq_len: int = DEFAULT_SEQ_LEN
    steps: int = DEFAULT_STEPS
    seed: int = DEFAULT_SEED
    workload: Workload = field(default_factory=Gaussian)

    def __post_init__(self):
        if self.seq_len < 2:
            raise SequenceTooShort(f"N must be >= 2, got {self.seq_len}")
        if self.steps < 0:
            raise InvalidPlan(f"steps must be >= 0, got {self.steps}")
        if not 0 <= self.seed < 2**64:
            raise InvalidPlan(f"seed must fit in 64 unsigned bits, got {self.seed}")

    def with_policy(self, policy: PolicyConfig) -> "SimSpec":
        return SimSpec(self.model, policy, self.seq_len, self.steps, self.seed, self.workload)

    def with_seed(self, seed: int) -> "SimSpec":
        return SimSpec(self.model, self.policy, self.seq_len, self.steps, seed, self.workload)

    def to_dict(self) -> Dict[str, Any]:
        m = self.model
        return {
            "seed": self.seed,
            "seq_len": self.seq_len,
            "steps": self.steps,
            "model": {
                "layers": m.layers,
                "q_heads": m.q_heads,
                "kv_heads": m.kv_heads,
                "head_dim": m.head_dim,
                "rope_base": m.rope_base,
            },
            "policy": self.policy.to_dict(),
            "workload": self.workload.to_dict(),
        }


# ============================================================================
# Generators
# ============================================================================

def generate_gaussian(
    model: ModelConfig, total: int, seed: int, query_correlation: float = QUERY_CORRELATION
) -> QkvSequence:
    """
    Unit-variance q/k/v for `total` tokens

    Every (layer, query head) has a persistent anchor direction; each query is
    rho * anchor + sqrt(1 - rho^2) * noise, so attention targets drift slowly.
    """
    if not 0 <= query_correlation <= 1:
        raise InvalidPlan(f"query correlation must lie in [0, 1], got {query_correlation}")
    rng = np.random.default_rng(seed)
    L, Hq, Hkv, d = model.layers, model.q_heads, model.kv_heads, model.head_dim
    anchor = rng.standard_normal((L, 1, Hq, d))
    noise = rng.standard_normal((L, total, Hq, d))
    rho = query_correlation
    queries = rho * anchor + np.sqrt(1.0 - rho * rho) * noise
    keys = rng.standard_normal((L, total, Hkv, d))
    values = rng.standard_normal((L, total, Hkv, d))
    return QkvSequence(queries, keys, values)


def check_needle(needle: Needle, seq_len: int, policy: Optional[PolicyConfig] = None) -> None:
    """Needle must sit before the last prompt token; warn when a plan would keep it anyway"""
    if not 0 <= needle.position < seq_len - 1:
        raise NeedleOutsideEvictable(
            f"needle position {needle.position} outside [0, {seq_len - 1}) for N={seq_len}"
        )
    if policy is None or policy.plan is None or policy.kind is PolicyKind.FULL:
        return
    plan = policy.plan
    recent = plan.recent if policy.kind in (PolicyKind.SAGE, PolicyKind.BLOCK_TOPK) else plan.recent - 1
    if needle.position < plan.sink or needle.position >= seq_len - 1 - recent:
        logger.warning(
            "needle at %d lies in the always-kept sink/recent window of %s",
            needle.position + 1, policy.label,
        )


def generate_needle(model: ModelConfig, seq_len: int, steps: int, needle: Needle, seed: int) -> QkvSequence:
    """
    Crafted retrieval instance

    Built in rotated space, per (layer, kv_head) with a random unit direction u:
      - the needle key is strength * u
      - every other key is Gaussian with its u-component damped
      - the last prompt query and all decode queries of the group are strength * sqrt(d) * u
    then each vector is un-rotated at its position, so the needle logit is strength^2 and
    the rest stay near zero.
    """
    check_needle(needle, seq_len)
    rng = np.random.default_rng(seed)
    L, Hq, Hkv, d = model.layers, model.q_heads, model.kv_heads, model.head_dim
    total = seq_len + steps
    positions = np.arange(total)
    base = model.rope_base

    queries = rng.standard_normal((L, total, Hq, d))
    keys = rng.standard_normal((L, total, Hkv, d))
    values = rng.standard_normal((L, total, Hkv, d))

    focused = np.arange(seq_len - 1, total)
    for layer in range(L):
        for kv in range(Hkv):
            u = rng.standard_normal(d)
            u /= np.linalg.norm(u)
            k_rot = keys[layer, :, kv]
            k_rot = k_rot - (1.0 - needle.damping) * np.outer(k_rot @ u, u)
            k_rot[needle.position] = needle.strength * u
            keys[layer, :, kv] = unrotate(k_rot, positions, base)

            q_rot = np.tile(needle.strength * np.sqrt(d) * u, (len(focused), 1))
            q_raw = unrotate(q_rot, focused, base)
            for head in model.q_heads_for(kv):
                queries[layer, focused, head] = q_raw

    logger.info(
        "needle workload: N=%d T=%d needle at %d, strength %.3g",
        seq_len, steps, needle.position + 1, needle.strength,
    )
    return QkvSequence(queries, keys, values)


def generate(spec: SimSpec) -> QkvSequence:
    """q/k/v for N + T tokens of the SimSpec's workload"""
    total = spec.seq_len + spec.steps
    if isinstance(spec.workload, Needle):
        check_needle(spec.workload, spec.seq_len, spec.policy)
        return generate_needle(spec.model, spec.seq_len, spec.steps, spec.workload, spec.seed)
    return generate_gaussian(spec.model, total, spec.seed, spec.workload.query_correlation)
