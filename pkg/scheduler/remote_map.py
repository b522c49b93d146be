from typing import Callable, Sequence

from errors import NoRemoteRail
from topology.graph import TopologyGraph
from topology.reachability import ReachabilityEntry


def map_remote(graph: TopologyGraph, local_rail: str, entries: Sequence[ReachabilityEntry],
               is_healthy: Callable[[str], bool]) -> str:
    """
    Remote rail for a chosen local rail.

    The affinity partner (same rail index on the remote node) wins when healthy;
    otherwise the healthy alternative with the lowest pair tier, then the
    closest index, then the lowest id. Deterministic for a fixed health state.

    Raises:
        NoRemoteRail: no healthy remote rail is reachable from ``local_rail``
    """
    local = graph.rails[local_rail]
    options = [e for e in entries if e.local_rail == local_rail and is_healthy(e.remote_rail)]
    if not options:
        raise NoRemoteRail(f"no healthy remote rail reachable from {local_rail}")
    for entry in options:
        if graph.rails[entry.remote_rail].index == local.index:
            return entry.remote_rail
    best = min(options, key=lambda e: (
        e.tier, abs(graph.rails[e.remote_rail].index - local.index), e.remote_rail
    ))
    return best.remote_rail
