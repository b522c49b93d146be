"""
Simulated multi-rail fabric.

Each rail is a FIFO server: a slice starts when the rail drains, takes
length / bandwidth to serialize, then completes after the rail latency plus
any jitter. A device segment reached through a link with a ``slowdown``
stretches the serialization time by that factor. Faults from a
``FaultSchedule`` bend that timeline. Everything is computed at post time
from the virtual clock and seeded generators, so a run is reproducible
event for event.
"""
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import TransportError
from topology.enums import CompletionStatus, Direction, Medium, RailKind
from topology.graph import Rail
from topology.segments import Segment
from transports.base import (BackendCapabilities, DeferredContext, RailTimeline, SliceWorkRequest,
                             TransportBackend, media_pairs)
from transports.faults import FaultSchedule, sample_jitter
from utils import setup_logger

logger = setup_logger(__name__)


class SimulatedBackend(TransportBackend):
    kind = "simulated"

    def __init__(self, spec, graph, registry, clock, faults: Optional[FaultSchedule] = None):
        if not clock.virtual:
            raise TransportError("the simulated backend runs on the virtual clock only")
        super().__init__(spec, graph, registry, clock)
        self.window = spec.inflight_window
        self.latency_s = spec.latency_us * 1e-6
        self.faults = FaultSchedule()
        self._timelines: Dict[str, RailTimeline] = {}
        self._rngs: Dict[str, np.random.Generator] = {}
        if faults is not None:
            self.set_faults(faults)

    def _build_capabilities(self, media: Tuple[Medium, ...]) -> BackendCapabilities:
        return BackendCapabilities(
            backend_id=self.backend_id,
            media_pairs=media_pairs(m for m in media if m is not Medium.FILE),
            directions=frozenset({Direction.READ, Direction.WRITE}),
            cross_node=True,
            same_node=False,
            rail_kind=RailKind.NETWORK,
            max_post_size=1 << 40,
            batched_post=True,
        )

    def set_faults(self, schedule: FaultSchedule) -> None:
        schedule.check_rails(self.graph)
        self.faults = schedule
        logger.info(f"Simulated backend {self.backend_id} loaded {len(schedule.faults)} faults")

    def simulate_advance(self, t: float) -> None:
        """Move virtual time to ``t``; completions due by then become pollable."""
        self.clock.advance_to(t)

    def rail_latency(self, rail: Rail) -> float:
        if rail.simulation is not None and rail.simulation.latency_us is not None:
            return rail.simulation.latency_us * 1e-6
        return self.latency_s

    @staticmethod
    def actual_bandwidth(rail: Rail) -> float:
        slowdown = rail.simulation.slowdown if rail.simulation is not None else 1.0
        return rail.bandwidth / slowdown

    def access_slowdown(self, rail: Rail, segment: Segment) -> float:
        """Extra serialization cost of reaching ``rail`` from the device behind ``segment``."""
        if segment.device_id is None or segment.node_id != rail.node_id:
            return 1.0
        link = self.graph.links.get((segment.device_id, rail.rail_id))
        if link is None or link.simulation is None:
            return 1.0
        return link.simulation.slowdown

    def timeline(self, rail_id: str) -> RailTimeline:
        if rail_id not in self._timelines:
            self._timelines[rail_id] = RailTimeline()
        return self._timelines[rail_id]

    def rng(self, rail_id: str) -> np.random.Generator:
        if rail_id not in self._rngs:
            self._rngs[rail_id] = np.random.default_rng([self.spec.seed, self.graph.ordinal(rail_id)])
        return self._rngs[rail_id]

    def _new_context(self, worker_id: int, rails: Sequence[Rail]) -> "SimulatedContext":
        return SimulatedContext(self, worker_id, rails)


class SimulatedContext(DeferredContext):
    backend: SimulatedBackend

    def post_slices(self, requests: Sequence[SliceWorkRequest]) -> int:
        resolved = self._validate(requests)
        now = self.clock.now()
        accepted = 0
        for request, src, dst in resolved:
            if self.inflight[request.local_rail] >= self.backend.window:
                break
            self._schedule(request, src, dst, now)
            accepted += 1
        return accepted

    def _schedule(self, request: SliceWorkRequest, src: Segment, dst: Segment, now: float) -> None:
        backend = self.backend
        faults = backend.faults
        local = backend.graph.rails[request.local_rail]
        remote = backend.graph.rails[request.remote_rail]

        bandwidth = min(backend.actual_bandwidth(local), backend.actual_bandwidth(remote))
        degrade = faults.active(local.rail_id, "degrade", now)
        if degrade is not None:
            bandwidth *= degrade.factor
        access = max(backend.access_slowdown(rail, segment) for rail in (local, remote) for segment in (src, dst))
        service = request.length * access / bandwidth

        timeline = backend.timeline(local.rail_id)
        start = timeline.reserve(now, service)
        latency = backend.rail_latency(local)

        jitter_spec = None
        jitter_fault = faults.active(local.rail_id, "jitter", now)
        if jitter_fault is not None:
            jitter_spec = jitter_fault.distribution
        elif local.simulation is not None:
            jitter_spec = local.simulation.jitter
        jitter = sample_jitter(jitter_spec, backend.rng(local.rail_id)) if jitter_spec is not None else 0.0

        completion = start + service + latency + jitter

        downs = [d for d in (faults.first_down(local.rail_id, now, completion),
                             faults.first_down(remote.rail_id, now, completion)) if d is not None]
        if downs:
            down_at = max(now, min(d.start_s for d in downs))
            moved = 0
            if down_at > start:
                moved = min(request.length, int(request.length * (down_at - start) / service))
            # the queue flushes when the rail goes down
            timeline.busy_until = min(timeline.busy_until, down_at)
            self._defer(down_at + latency, request, src, dst, CompletionStatus.FAILED, moved, now)
            return

        dropped = faults.active(local.rail_id, "drop_completion", completion) is not None
        self._defer(completion, request, src, dst, CompletionStatus.OK, request.length, now, emit=not dropped)

    def trace(self) -> List[Tuple[float, int, int]]:
        """Pending (due, slice id, attempt) triples, for reproducibility checks."""
        with self._pending_lock:
            return sorted((item.due, item.request.slice_id, item.request.attempt) for item in self._heap)
