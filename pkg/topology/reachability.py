from dataclasses import dataclass
from typing import FrozenSet, List, Sequence

from topology.enums import Direction, RailKind, Tier
from topology.graph import Rail, TopologyGraph
from topology.segments import Segment


@dataclass(frozen=True)
class ReachabilityEntry:
    """
    One usable (local rail, remote rail) pair for a backend.

    ``local_rail`` is on the initiating side: the source for WRITE, the
    destination for READ. ``local_tier`` is what the scheduler penalizes;
    ``tier`` is the pair tier used to rank routes.
    """

    local_rail: str
    remote_rail: str
    tier: Tier
    local_tier: Tier
    directions: FrozenSet[Direction]
    backend_id: str


def initiator_sides(src: Segment, dst: Segment, direction: Direction):
    """(local, remote) segments for a transfer; bytes always flow src -> dst."""
    if direction is Direction.WRITE:
        return src, dst
    return dst, src


def pair_tier(graph: TopologyGraph, local: Rail, local_device, remote: Rail, remote_device) -> Tier:
    tier = max(graph.tier_of(local.rail_id, local_device), graph.tier_of(remote.rail_id, remote_device))
    if local.kind is RailKind.NETWORK and local.index != remote.index:
        tier = max(tier, Tier.SAME_SOCKET)
    return Tier(tier)


def reachable_rails(graph: TopologyGraph, backends: Sequence, src: Segment, dst: Segment,
                    direction: Direction = Direction.WRITE) -> List[ReachabilityEntry]:
    """
    Every (local, remote) rail pair some backend can use between two segments.

    A backend contributes entries when its capabilities cover the media pair,
    the direction and the node relationship (same node or cross node).
    Fatally latched backends are skipped.

    Returns:
        List[ReachabilityEntry]: sorted by pair tier; empty when no backend fits
    """
    local_seg, remote_seg = initiator_sides(src, dst, direction)
    same_node = src.node_id == dst.node_id
    entries: List[ReachabilityEntry] = []

    for order, backend in enumerate(backends):
        if backend.is_fatal:
            continue
        caps = backend.capabilities
        if not caps.covers(src.medium, dst.medium, direction):
            continue
        if same_node and not caps.same_node or not same_node and not caps.cross_node:
            continue
        if not (src.has_metadata(caps.backend_id) and dst.has_metadata(caps.backend_id)):
            continue

        local_rails = [r for r in graph.rails_on(local_seg.node_id, caps.rail_kind) if backend.serves(r)]
        if caps.rail_kind is RailKind.NETWORK:
            remote_rails = [r for r in graph.rails_on(remote_seg.node_id, caps.rail_kind) if backend.serves(r)]
        else:
            # intra-node channels use one rail for both ends
            remote_rails = None

        for local in local_rails:
            local_tier = graph.tier_of(local.rail_id, local_seg.device_id)
            for remote in (remote_rails if remote_rails is not None else [local]):
                entries.append((
                    order,
                    ReachabilityEntry(
                        local_rail=local.rail_id,
                        remote_rail=remote.rail_id,
                        tier=pair_tier(graph, local, local_seg.device_id, remote, remote_seg.device_id),
                        local_tier=local_tier,
                        directions=caps.directions,
                        backend_id=caps.backend_id,
                    ),
                ))

    entries.sort(key=lambda item: (
        item[1].tier, item[0], graph.ordinal(item[1].local_rail), graph.ordinal(item[1].remote_rail)
    ))
    return [entry for _, entry in entries]
