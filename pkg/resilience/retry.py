from dataclasses import dataclass
from typing import Collection, Optional, Sequence, Tuple

from config import ResilienceConfig, SchedulerConfig
from resilience.health import HealthMonitor
from scheduler.cost_model import CostModel
from topology.graph import TopologyGraph
from topology.reachability import ReachabilityEntry


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int
    timeout_s: float
    backoff_s: float

    @classmethod
    def from_config(cls, config: ResilienceConfig, timeout_s: float) -> "RetryPolicy":
        return cls(config.max_attempts, timeout_s, config.retry_backoff_s)

    def delay(self, attempt: int) -> float:
        """Wait before reissuing after the ``attempt``-th try failed."""
        return self.backoff_s * (2 ** max(0, attempt - 1))

    def exhausted(self, attempt: int) -> bool:
        return attempt >= self.max_attempts


def select_retry_pair(graph: TopologyGraph, entries: Sequence[ReachabilityEntry],
                      blacklist: Collection[Tuple[str, str]], health: HealthMonitor, cost: CostModel,
                      config: SchedulerConfig) -> Optional[ReachabilityEntry]:
    """
    Best rail pair for reissuing a failed slice, bypassing the cost model.

    Healthy, schedulable pairs the slice has not failed on come first, ranked
    by whether the local rail has failures pending, the pair tier and the
    rail's queued bytes. A blacklisted pair is reused only when nothing else
    is left.

    Returns:
        Optional[ReachabilityEntry]: None when no healthy pair exists (the slice parks)
    """
    usable = [
        e for e in entries
        if health.is_healthy(e.local_rail) and health.is_healthy(e.remote_rail)
        and config.penalties[int(e.local_tier)] is not None
    ]
    if not usable:
        return None
    fresh = [e for e in usable if (e.local_rail, e.remote_rail) not in blacklist]
    pool = fresh or usable
    return min(pool, key=lambda e: (
        health.rails[e.local_rail].consecutive_failures > 0,
        e.tier,
        cost.states[e.local_rail].queued_bytes,
        graph.ordinal(e.local_rail),
        graph.ordinal(e.remote_rail),
    ))
