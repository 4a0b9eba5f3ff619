"""
Policy Registry
Central registry for all eviction policies
Maps CLI names to policy classes so new baselines plug in without touching the simulator
"""

from typing import Callable, Dict, List, Optional

from config import DEFAULT_BLOCK_SIZE, DEFAULT_POOLING
from errors import UnknownPolicy
from kv_cache import ModelConfig
from policies.base import EvictionPolicy, PolicyConfig, PolicyKind, Pooling
from policies.block_topk import BlockTopKPolicy
from policies.full import FullPolicy
from policies.sage import SagePolicy
from policies.streamllm import StreamLLMAbsolutePolicy, StreamLLMRelativePolicy

PolicyFactory = Callable[[PolicyConfig, ModelConfig], EvictionPolicy]


class PolicyRegistry:
    """
    Registry of all available eviction policies

    Each entry carries the policy kind, its factory and an optional pooling override
    (aliases such as "infllm" are BlockTopK with a fixed pooling).
    """

    def __init__(self):
        self._policies: Dict[str, Dict] = {}
        self._register_default_policies()

    def _register_default_policies(self):
        """Register the built-in policies"""

        # Reference
        self.register(
            name="full",
            kind=PolicyKind.FULL,
            factory=FullPolicy,
            description="No eviction; reference for every comparison",
        )

        # One-time selection
        self.register(
            name="sage",
            kind=PolicyKind.SAGE,
            factory=SagePolicy,
            description="Sink + per-head one-time top-k + recent",
        )

        # Static windows
        self.register(
            name="streamllm_r",
            kind=PolicyKind.STREAMLLM_R,
            factory=StreamLLMRelativePolicy,
            description="Sink + recent, positions re-indexed inside the window",
        )
        self.register(
            name="streamllm_abs",
            kind=PolicyKind.STREAMLLM_ABS,
            factory=StreamLLMAbsolutePolicy,
            description="Sink + recent, original absolute positions",
        )

        # Dynamic block selection
        self.register(
            name="block_topk",
            kind=PolicyKind.BLOCK_TOPK,
            factory=BlockTopKPolicy,
            description="Per-step block top-k over the resident pool (MinMax by default)",
        )
        self.register(
            name="quest",
            kind=PolicyKind.BLOCK_TOPK,
            factory=BlockTopKPolicy,
            description="Block top-k with MinMax summaries",
            pooling=Pooling.MINMAX,
        )
        self.register(
            name="infllm",
            kind=PolicyKind.BLOCK_TOPK,
            factory=BlockTopKPolicy,
            description="Block top-k with Mean summaries",
            pooling=Pooling.MEAN,
        )

    def register(
        self,
        name: str,
        kind: PolicyKind,
        factory: PolicyFactory,
        description: str,
        pooling: Optional[Pooling] = None,
        enabled: bool = True,
    ):
        """
        Register a policy

        Args:
            name: CLI identifier (e.g., "sage", "infllm")
            kind: policy kind the name resolves to
            factory: callable building the policy from (PolicyConfig, ModelConfig)
            description: what this policy does
            pooling: fixed block pooling for aliases, None to take the caller's
            enabled: whether the name is offered by the CLI
        """
        self._policies[name] = {
            "name": name,
            "kind": PolicyKind(kind),
            "factory": factory,
            "description": description,
            "pooling": pooling,
            "enabled": enabled,
        }

    def get_policy(self, name: str) -> Dict:
        """Get policy entry by name"""
        entry = self._policies.get(name)
        if entry is None:
            raise UnknownPolicy(f"unknown policy '{name}' (known: {', '.join(sorted(self._policies))})")
        return entry

    def get_enabled_policies(self) -> Dict[str, Dict]:
        return {name: entry for name, entry in self._policies.items() if entry["enabled"]}

    def build_config(
        self,
        name: str,
        model: ModelConfig,
        budget: Optional[int] = None,
        sink: Optional[int] = None,
        topk: Optional[int] = None,
        recent: Optional[int] = None,
        block_size: int = DEFAULT_BLOCK_SIZE,
        pooling=None,
    ) -> PolicyConfig:
        entry = self.get_policy(name)
        pooling = entry["pooling"] or pooling or DEFAULT_POOLING
        return PolicyConfig.build(
            entry["kind"], budget, model.group_size, sink, topk, recent, block_size, pooling
        )

    def create(self, config: PolicyConfig, model: ModelConfig) -> EvictionPolicy:
        """Instantiate the policy registered under the config's kind"""
        return self.get_policy(config.kind.value)["factory"](config, model)


# Global registry instance
policy_registry = PolicyRegistry()


# Helper functions for easy access
def get_policy_names() -> List[str]:
    return list(policy_registry.get_enabled_policies())


def create_policy(name: str, model: ModelConfig, **params) -> EvictionPolicy:
    """Build config and policy in one go (params as in PolicyRegistry.build_config)"""
    config = policy_registry.build_config(name, model, **params)
    return policy_registry.create(config, model)
