"""
Pipelined execution of staged routes.

Every node with a staging segment has a pool carved into rings of
``ring_depth`` chunk slots. A staged transfer holds one ring per staging node
it touches; each chunk borrows one slot index (the same index on both nodes)
and walks its legs in order, so chunk k can be on the network while chunk
k + 1 is still being filled. A pool with no free ring queues the transfer.
"""
import threading
from collections import deque
from typing import Callable, Deque, Dict, List, Optional, Set

from config import StagingConfig
from orchestrator.plan import STAGING_SEGMENT, StageLeg, StagedRoute
from topology.enums import ChunkState, StageKind
from topology.segments import SegmentDescriptor, SegmentRegistry
from utils import setup_logger

logger = setup_logger(__name__)

STAGE_STATES = {
    StageKind.D2H: ChunkState.FILLING,
    StageKind.H2H: ChunkState.IN_NETWORK,
    StageKind.H2D: ChunkState.DRAINING,
}


class StagingRing:
    def __init__(self, node_id: str, segment_id: str, base: int, chunk_size: int, depth: int):
        self.node_id = node_id
        self.segment_id = segment_id
        self.base = base
        self.chunk_size = chunk_size
        self.depth = depth

    def slot_offset(self, slot: int) -> int:
        return self.base + slot * self.chunk_size


class StagingPool:
    """Fixed set of rings inside one node's staging segment."""

    def __init__(self, node_id: str, config: StagingConfig):
        self.node_id = node_id
        self.segment_id = STAGING_SEGMENT.format(node=node_id)
        ring_bytes = config.chunk_size * config.ring_depth
        self.capacity = config.pool_bytes // ring_bytes
        self._free = deque(
            StagingRing(node_id, self.segment_id, i * ring_bytes, config.chunk_size, config.ring_depth)
            for i in range(self.capacity)
        )

    def acquire(self) -> Optional[StagingRing]:
        return self._free.popleft() if self._free else None

    def release(self, ring: StagingRing) -> None:
        self._free.append(ring)

    @property
    def available(self) -> int:
        return len(self._free)


class ChunkRun:
    """One chunk moving through the legs of a staged route."""

    def __init__(self, job: "StagedJob", unit, slot: int):
        self.job = job
        self.unit = unit
        self.slot = slot
        self.generation = unit.generation
        self.leg_index = 0
        self.pending = 0
        self.finished = False

    @property
    def state(self) -> ChunkState:
        return STAGE_STATES[self.job.route.legs[self.leg_index].kind]

    def endpoint(self, segment_id: str, transfer_offset: int) -> int:
        ring = self.job.rings.get(segment_id)
        if ring is not None:
            return ring.slot_offset(self.slot)
        return transfer_offset + self.unit.offset

    def fragment_done(self, fragment) -> bool:
        with self.job.lock:
            if self.finished or self.job.abandoned or fragment.generation != self.unit.generation:
                return False
            self.pending -= 1
            if self.pending > 0:
                return False
            if self.leg_index + 1 < len(self.job.route.legs):
                self.leg_index += 1
                self.job.start_leg(self)
                return False
            self.finished = True
            self.unit.done = True
            self.job.chunk_finished(self)
            return True

    def fragment_retired(self, fragment) -> None:
        self.job.fragment_retired(self.slot)


class StagedJob:
    """All incomplete chunks of one transfer on one staged route."""

    def __init__(self, manager: "StagingManager", transfer, route: StagedRoute, units: List):
        self.manager = manager
        self.transfer = transfer
        self.route = route
        self.pending_units: Deque = deque(units)
        self.rings: Dict[str, StagingRing] = {}
        self.free_slots: Deque[int] = deque()
        self.outstanding: Dict[int, int] = {}
        self.active: Dict[int, ChunkRun] = {}
        self.abandoned = False
        self.released = False
        self.peak_overlap = 0
        self.lock = threading.RLock()

    @property
    def complete(self) -> bool:
        return not self.pending_units and not self.active

    def attach(self, rings: List[StagingRing]) -> None:
        depth = self.manager.config.ring_depth
        self.rings = {ring.segment_id: ring for ring in rings}
        self.free_slots = deque(range(depth))
        self.outstanding = {slot: 0 for slot in range(depth)}

    def pump(self) -> None:
        """Start chunks while slots are free."""
        with self.lock:
            while self.pending_units and self.free_slots and not self.abandoned:
                unit = self.pending_units.popleft()
                if unit.done:
                    continue
                chunk = ChunkRun(self, unit, self.free_slots.popleft())
                self.active[chunk.slot] = chunk
                self.start_leg(chunk)

    def start_leg(self, chunk: ChunkRun) -> None:
        leg: StageLeg = self.route.legs[chunk.leg_index]
        transfer = self.transfer
        src_offset = chunk.endpoint(leg.src_segment, transfer.src_offset)
        dst_offset = chunk.endpoint(leg.dst_segment, transfer.dst_offset)
        states = {c.state for c in self.active.values()}
        self.peak_overlap = max(self.peak_overlap, len(states))
        self.manager.record_overlap(len(states))
        chunk.pending = self.manager.launch(chunk, leg, src_offset, dst_offset, chunk.unit.length)

    def fragment_retired(self, slot: int) -> None:
        with self.lock:
            self.outstanding[slot] -= 1
            self._maybe_free(slot)

    def fragment_created(self, slot: int) -> None:
        with self.lock:
            self.outstanding[slot] += 1

    def chunk_finished(self, chunk: ChunkRun) -> None:
        with self.lock:
            self.active.pop(chunk.slot, None)
            self._maybe_free(chunk.slot)
        self.pump()

    def _maybe_free(self, slot: int) -> None:
        if slot in self.active or self.outstanding.get(slot, 0) > 0:
            return
        if not self.abandoned and slot not in self.free_slots:
            self.free_slots.append(slot)
        if (self.abandoned or self.complete) and not any(self.outstanding.values()):
            self.manager.release(self)

    def abandon(self) -> None:
        """Stop starting chunks; the rings go back once stray fragments drain."""
        with self.lock:
            self.abandoned = True
            self.active.clear()
            self.pending_units.clear()
            if not any(self.outstanding.values()):
                self.manager.release(self)


class StagingManager:
    """
    Owns the per-node staging pools and the queue of transfers waiting for one.

    ``launch`` is supplied by the engine: it turns one leg of one chunk into
    scheduled fragments and returns how many it created.
    """

    def __init__(self, config: StagingConfig, launch: Callable[[ChunkRun, StageLeg, int, int, int], int]):
        self.config = config
        self.launch = launch
        self.pools: Dict[str, StagingPool] = {}
        self.waiting: Deque[StagedJob] = deque()
        self.running: Set[StagedJob] = set()
        self.peak_overlap = 0
        self._lock = threading.RLock()

    def register_pools(self, registry: SegmentRegistry, node_ids) -> None:
        for node_id in node_ids:
            segment_id = STAGING_SEGMENT.format(node=node_id)
            if segment_id not in registry:
                registry.register(SegmentDescriptor.single(
                    segment_id, node_id, self.config.pool_bytes, materialize=self.config.materialize
                ))
            self.pools[node_id] = StagingPool(node_id, self.config)
        logger.info(f"Staging pools ready on {len(self.pools)} nodes "
                    f"({self.config.pool_bytes} bytes, {self.config.chunk_size}-byte chunks)")

    def record_overlap(self, stages: int) -> None:
        self.peak_overlap = max(self.peak_overlap, stages)

    def submit(self, transfer, route: StagedRoute, units: List) -> StagedJob:
        job = StagedJob(self, transfer, route, units)
        with self._lock:
            self.waiting.append(job)
        self.admit_waiting()
        return job

    def _try_attach(self, job: StagedJob) -> bool:
        rings = []
        for node_id in job.route.staging_nodes:
            ring = self.pools[node_id].acquire()
            if ring is None:
                for taken in rings:
                    self.pools[taken.node_id].release(taken)
                return False
            rings.append(ring)
        job.attach(rings)
        return True

    def admit_waiting(self) -> int:
        """Give rings to queued transfers in arrival order; returns how many started."""
        started = []
        with self._lock:
            while self.waiting:
                job = self.waiting[0]
                if job.abandoned or job.transfer.closed:
                    self.waiting.popleft()
                    continue
                if not self._try_attach(job):
                    break
                self.waiting.popleft()
                self.running.add(job)
                started.append(job)
        for job in started:
            job.pump()
        return len(started)

    def release(self, job: StagedJob) -> None:
        with self._lock:
            if job.released:
                return
            job.released = True
            self.running.discard(job)
            for ring in job.rings.values():
                self.pools[ring.node_id].release(ring)
            if job in self.waiting:
                self.waiting.remove(job)
        if self.waiting:
            self.admit_waiting()
