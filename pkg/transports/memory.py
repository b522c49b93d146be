import time
from collections import deque
from typing import Deque, List, Sequence, Tuple

from topology.enums import CompletionStatus, Direction, Medium, RailKind
from topology.graph import Rail
from topology.segments import copy_bytes
from transports.base import (MIN_SERVICE_TIME_S, BackendCapabilities, CompletionEvent, DeferredContext,
                             RailTimeline, SliceWorkRequest, TransportBackend, media_pairs)


class LocalCopyContext(DeferredContext):
    """
    Copies between two segments on one node through the node-local rail.

    On the virtual clock the copy is modeled on the rail's FIFO timeline and
    lands at its modeled completion; on the real clock it runs inline and the
    completion is ready on the next poll.
    """

    def __init__(self, backend, worker_id: int, rails: Sequence[Rail]):
        super().__init__(backend, worker_id, rails)
        self._timelines = {rail_id: RailTimeline() for rail_id in self.rails}
        self._ready: Deque[CompletionEvent] = deque()

    def post_slices(self, requests: Sequence[SliceWorkRequest]) -> int:
        resolved = self._validate(requests)
        accepted = 0
        for request, src, dst in resolved:
            if self.inflight[request.local_rail] >= self.backend.spec.inflight_window:
                break
            if self.clock.virtual:
                now = self.clock.now()
                rail = self.rails[request.local_rail]
                service = request.length / rail.bandwidth
                start = self._timelines[rail.rail_id].reserve(now, service)
                completion = start + service + self.backend.spec.latency_us * 1e-6
                self._defer(completion, request, src, dst, CompletionStatus.OK, request.length, now)
            else:
                began = time.perf_counter()
                moved = copy_bytes(src, request.src_offset, dst, request.dst_offset, request.length)
                elapsed = time.perf_counter() - began
                self._ready.append(CompletionEvent(
                    slice_id=request.slice_id,
                    batch_id=request.batch_id,
                    attempt=request.attempt,
                    status=CompletionStatus.OK,
                    rail_id=request.local_rail,
                    t_obs=max(elapsed, MIN_SERVICE_TIME_S),
                    bytes_moved=moved if src.materialized else request.length,
                    completed_at=self.clock.now(),
                ))
            accepted += 1
        return accepted

    def poll_completions(self, max_events: int) -> List[CompletionEvent]:
        events: List[CompletionEvent] = []
        fatal = self.backend.is_fatal
        while self._ready and len(events) < max_events:
            event = self._ready.popleft()
            if fatal:
                # copied before the latch, reported after it: the caller re-sends
                event = CompletionEvent(event.slice_id, event.batch_id, event.attempt, CompletionStatus.FAILED,
                                        event.rail_id, event.t_obs, 0, event.completed_at)
            events.append(event)
        if len(events) < max_events:
            events.extend(super().poll_completions(max_events - len(events)))
        return events

    def next_due_time(self):
        if self._ready:
            return self.clock.now()
        return super().next_due_time()


class MemoryBackend(TransportBackend):
    """Intra-process copy between host or emulated-device segments on one node."""

    kind = "memory"

    def _build_capabilities(self, media: Tuple[Medium, ...]) -> BackendCapabilities:
        return BackendCapabilities(
            backend_id=self.backend_id,
            media_pairs=media_pairs(m for m in media if m is not Medium.FILE),
            directions=frozenset({Direction.READ, Direction.WRITE}),
            cross_node=False,
            same_node=True,
            rail_kind=RailKind.MEMORY,
            max_post_size=1 << 40,
            batched_post=True,
        )

    def _new_context(self, worker_id: int, rails: Sequence[Rail]) -> LocalCopyContext:
        return LocalCopyContext(self, worker_id, rails)
