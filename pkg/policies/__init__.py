"""
Policies Package
Eviction policy contract, the built-in policies and their registry
"""

from policies.base import EvictionPolicy, PolicyConfig, PolicyKind, PolicyState, Pooling
from policies.block_topk import (
    BlockPool,
    BlockSummary,
    BlockTopKCache,
    BlockTopKPolicy,
    block_summarize,
    block_topk_step,
)
from policies.full import FullPolicy
from policies.registry import create_policy, get_policy_names, policy_registry
from policies.sage import SagePolicy, sage_compress
from policies.selection import top_k_indices
from policies.streamllm import StreamLLMAbsolutePolicy, StreamLLMRelativePolicy, streamllm_compress

__all__ = [
    # Contract
    "EvictionPolicy",
    "PolicyConfig",
    "PolicyKind",
    "PolicyState",
    "Pooling",

    # Policies
    "FullPolicy",
    "SagePolicy",
    "StreamLLMRelativePolicy",
    "StreamLLMAbsolutePolicy",
    "BlockTopKPolicy",

    # Operations
    "top_k_indices",
    "sage_compress",
    "streamllm_compress",
    "block_summarize",
    "block_topk_step",
    "BlockPool",
    "BlockSummary",
    "BlockTopKCache",

    # Registry
    "policy_registry",
    "create_policy",
    "get_policy_names",
]
