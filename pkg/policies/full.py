"""
Full policy
Keeps every entry; the reference all other policies are measured against
"""

from attention import PrefillResult
from policies.base import EvictionPolicy, PolicyState


class FullPolicy(EvictionPolicy):
    name = "full"
    description = "No eviction: attends the whole growing cache"

    def compress(self, prefill: PrefillResult) -> PolicyState:
        self._check_prefill(prefill)
        return PolicyState(cache=prefill.cache.copy(), evicted=False)
