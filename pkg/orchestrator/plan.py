"""
Route planning: which transports can carry a transfer, ranked.

A direct route is one backend with the full set of rail pairs it can use
between the two segments; picking the rail is the scheduler's job. A staged
route chains up to three legs (device to host, host to host across nodes,
host to device) through engine-owned staging memory, for endpoints that no
single backend can join.
"""
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple, Union

from config import SchedulerConfig, StagingConfig
from errors import AllRoutesExhausted, InvalidRange, NoRoute
from topology.enums import Direction, Medium, StageKind, Tier
from topology.graph import TopologyGraph
from topology.reachability import ReachabilityEntry, reachable_rails
from topology.segments import Segment, SegmentRegistry
from utils import setup_logger

logger = setup_logger(__name__)

STAGING_SEGMENT = "__staging__/{node}"


@dataclass(frozen=True)
class DirectRoute:
    backend_id: str
    entries: Tuple[ReachabilityEntry, ...]
    best_tier: Tier

    @property
    def backend_ids(self) -> Tuple[str, ...]:
        return (self.backend_id,)

    @property
    def staged(self) -> bool:
        return False


@dataclass(frozen=True)
class StageLeg:
    kind: StageKind
    backend_id: str
    entries: Tuple[ReachabilityEntry, ...]
    src_segment: str
    dst_segment: str
    direction: Direction

    @property
    def best_tier(self) -> Tier:
        return min(e.tier for e in self.entries)


@dataclass(frozen=True)
class StagedRoute:
    legs: Tuple[StageLeg, ...]
    chunk_size: int

    @property
    def best_tier(self) -> Tier:
        return max(leg.best_tier for leg in self.legs)

    @property
    def backend_ids(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(leg.backend_id for leg in self.legs))

    @property
    def staged(self) -> bool:
        return True

    @property
    def staging_nodes(self) -> Tuple[str, ...]:
        nodes = []
        for leg in self.legs:
            for segment_id in (leg.src_segment, leg.dst_segment):
                if segment_id.startswith("__staging__/"):
                    nodes.append(segment_id.split("/", 1)[1])
        return tuple(dict.fromkeys(nodes))


Route = Union[DirectRoute, StagedRoute]


@dataclass
class TransferPlan:
    """
    Ranked candidate routes for one transfer plus the active index.

    The index only moves forward; ``failed_backends`` remembers every backend
    this transfer has given up on so a later substitution never returns to it.
    """

    transfer_id: int
    routes: Tuple[Route, ...]
    active_index: int = 0
    failed_backends: Set[str] = field(default_factory=set)
    lock: threading.RLock = field(default_factory=threading.RLock, repr=False, compare=False)

    @property
    def active(self) -> Route:
        return self.routes[self.active_index]

    def advance(self, failed_backend: str, fatal_backends: Sequence[str] = ()) -> Route:
        """
        Move past every route that touches a failed backend.

        Raises:
            AllRoutesExhausted: no later route avoids the failed backends
        """
        with self.lock:
            self.failed_backends.add(failed_backend)
            dead = self.failed_backends | set(fatal_backends)
            for index in range(self.active_index + 1, len(self.routes)):
                if not dead.intersection(self.routes[index].backend_ids):
                    self.active_index = index
                    return self.routes[index]
            raise AllRoutesExhausted(
                f"transfer {self.transfer_id}: no route left after {sorted(self.failed_backends)} failed"
            )


def _schedulable(entries: Sequence[ReachabilityEntry], config: SchedulerConfig) -> bool:
    return any(config.penalties[int(e.local_tier)] is not None for e in entries)


def _group_by_backend(entries: Sequence[ReachabilityEntry]) -> Dict[str, List[ReachabilityEntry]]:
    grouped: Dict[str, List[ReachabilityEntry]] = {}
    for entry in entries:
        grouped.setdefault(entry.backend_id, []).append(entry)
    return grouped


class Orchestrator:
    """
    Builds transfer plans and promotes the next route when a backend fails.

    Planning reads the graph, the segment registry and backend capabilities
    only; it never allocates anything.
    """

    def __init__(self, graph: TopologyGraph, registry: SegmentRegistry, backends: Sequence,
                 scheduler_config: SchedulerConfig, staging_config: StagingConfig):
        self.graph = graph
        self.registry = registry
        self.backends = list(backends)
        self.scheduler_config = scheduler_config
        self.staging_config = staging_config
        self._order = {b.backend_id: i for i, b in enumerate(self.backends)}

    def _live(self):
        return [b for b in self.backends if not b.is_fatal]

    def _staging(self, node_id: str) -> Optional[Segment]:
        segment_id = STAGING_SEGMENT.format(node=node_id)
        return self.registry.get(segment_id) if segment_id in self.registry else None

    def _direct_routes(self, src: Segment, dst: Segment, direction: Direction) -> List[DirectRoute]:
        entries = reachable_rails(self.graph, self._live(), src, dst, direction)
        routes = []
        for backend_id, group in _group_by_backend(entries).items():
            if not _schedulable(group, self.scheduler_config):
                continue
            routes.append(DirectRoute(backend_id, tuple(group), min(e.tier for e in group)))
        return routes

    def _leg_options(self, kind: StageKind, src: Segment, dst: Segment,
                     direction: Direction) -> List[StageLeg]:
        entries = reachable_rails(self.graph, self._live(), src, dst, direction)
        return [
            StageLeg(kind, backend_id, tuple(group), src.segment_id, dst.segment_id, direction)
            for backend_id, group in _group_by_backend(entries).items()
            if _schedulable(group, self.scheduler_config)
        ]

    def _staged_routes(self, src: Segment, dst: Segment, direction: Direction) -> List[StagedRoute]:
        if src.node_id == dst.node_id or (src.medium is Medium.HOST and dst.medium is Medium.HOST):
            return []
        stage_src = self._staging(src.node_id) if src.medium is not Medium.HOST else None
        stage_dst = self._staging(dst.node_id) if dst.medium is not Medium.HOST else None
        if src.medium is not Medium.HOST and stage_src is None or dst.medium is not Medium.HOST and stage_dst is None:
            return []

        head: List[StageLeg] = []
        if stage_src is not None:
            options = self._leg_options(StageKind.D2H, src, stage_src, Direction.WRITE)
            if not options:
                return []
            head = [options[0]]
        tail: List[StageLeg] = []
        if stage_dst is not None:
            options = self._leg_options(StageKind.H2D, stage_dst, dst, Direction.WRITE)
            if not options:
                return []
            tail = [options[0]]

        middle = self._leg_options(StageKind.H2H, stage_src or src, stage_dst or dst, direction)
        return [StagedRoute(tuple(head + [leg] + tail), self.staging_config.chunk_size) for leg in middle]

    def build_plan(self, transfer_id: int, src: Segment, src_offset: int, dst: Segment, dst_offset: int,
                   length: int, direction: Direction = Direction.WRITE) -> TransferPlan:
        """
        Rank every way of moving [src_offset, +length) of ``src`` to ``dst``.

        Routes sort by best-case tier, direct before staged at equal tier, then
        by backend load order. Deterministic for a frozen health state.

        Raises:
            InvalidRange: either range is not inside one registered buffer
            NoRoute: no backend, or chain of backends, joins the endpoints
        """
        if length < 1:
            raise InvalidRange("transfer length must be >= 1")
        src.locate(src_offset, length)
        dst.locate(dst_offset, length)

        ranked = []
        for route in self._direct_routes(src, dst, direction):
            ranked.append(((route.best_tier, 0, self._order[route.backend_id]), route))
        for route in self._staged_routes(src, dst, direction):
            middle = next(leg for leg in route.legs if leg.kind is StageKind.H2H)
            ranked.append(((route.best_tier, 1, self._order[middle.backend_id]), route))
        if not ranked:
            raise NoRoute(
                f"no route from {src.segment_id} ({src.node_id}, {src.medium.value}) "
                f"to {dst.segment_id} ({dst.node_id}, {dst.medium.value})"
            )
        ranked.sort(key=lambda item: item[0])
        return TransferPlan(transfer_id, tuple(route for _, route in ranked))

    def substitute_backend(self, plan: TransferPlan, failed_backend: str, complete: bool = False) -> TransferPlan:
        """
        Promote the next-best route after ``failed_backend`` gave up.

        A no-op for a finished transfer, or when the active route no longer
        uses the failed backend (another failure already moved it).

        Raises:
            AllRoutesExhausted: nothing left to try
        """
        if complete:
            return plan
        with plan.lock:
            if failed_backend not in plan.active.backend_ids:
                return plan
            fatal = [b.backend_id for b in self.backends if b.is_fatal]
            previous = plan.active_index
            plan.advance(failed_backend, fatal)
            logger.warning(
                f"Transfer {plan.transfer_id}: backend {failed_backend} dropped, "
                f"route {previous} -> {plan.active_index} ({', '.join(plan.active.backend_ids)})"
            )
        return plan
