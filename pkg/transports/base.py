import heapq
import itertools
import json
import threading
from abc import ABC, abstractmethod
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

from errors import CapabilityMismatch, FatalBackendError
from topology.enums import CompletionStatus, Direction, Medium, RailKind
from topology.graph import Rail, TopologyGraph
from topology.segments import Segment, SegmentRegistry, copy_bytes
from utils import setup_logger

logger = setup_logger(__name__)

MIN_SERVICE_TIME_S = 1e-9


def media_pairs(media: Iterable[Medium]) -> FrozenSet[Tuple[Medium, Medium]]:
    media = tuple(media)
    return frozenset((a, b) for a in media for b in media)


@dataclass(frozen=True)
class BackendCapabilities:
    backend_id: str
    media_pairs: FrozenSet[Tuple[Medium, Medium]]
    directions: FrozenSet[Direction]
    cross_node: bool
    same_node: bool
    rail_kind: RailKind
    max_post_size: int
    batched_post: bool

    @property
    def media(self) -> FrozenSet[Medium]:
        return frozenset(m for pair in self.media_pairs for m in pair)

    def covers(self, src_medium: Medium, dst_medium: Medium, direction: Direction) -> bool:
        return (src_medium, dst_medium) in self.media_pairs and direction in self.directions


@dataclass(frozen=True)
class SliceWorkRequest:
    slice_id: int
    batch_id: int
    src_segment: str
    src_offset: int
    dst_segment: str
    dst_offset: int
    length: int
    direction: Direction
    local_rail: str
    remote_rail: str
    attempt: int = 1


@dataclass(frozen=True)
class CompletionEvent:
    slice_id: int
    batch_id: int
    attempt: int
    status: CompletionStatus
    rail_id: str
    t_obs: float
    bytes_moved: int
    completed_at: float


class TransportBackend(ABC):
    """
    One loaded transport.

    The backend object holds capabilities, per-segment metadata and the fatal
    latch; slices are posted and polled through per-worker contexts.
    """

    kind = ""
    default_media: Tuple[Medium, ...] = (Medium.HOST, Medium.DEVICE)

    def __init__(self, spec, graph: TopologyGraph, registry: SegmentRegistry, clock):
        self.spec = spec
        self.backend_id = spec.resolved_id
        self.graph = graph
        self.registry = registry
        self.clock = clock
        self.capabilities = self._build_capabilities(tuple(spec.media or self.default_media))
        self._fatal_reason: Optional[str] = None
        self._lock = threading.Lock()
        self._contexts: List["TransportContext"] = []

    @abstractmethod
    def _build_capabilities(self, media: Tuple[Medium, ...]) -> BackendCapabilities:
        pass

    @abstractmethod
    def _new_context(self, worker_id: int, rails: Sequence[Rail]) -> "TransportContext":
        pass

    def serves(self, rail: Rail) -> bool:
        return rail.kind is self.capabilities.rail_kind and rail.allows(self.kind)

    def attach_metadata(self, segment: Segment) -> Optional[bytes]:
        if segment.medium not in self.capabilities.media:
            return None
        return json.dumps({"backend": self.backend_id, "wire_id": segment.wire_id.hex()}).encode()

    def start(self) -> None:
        pass

    def stop(self) -> None:
        for context in self._contexts:
            context.close()

    def open_context(self, worker_id: int, rails: Sequence[Rail]) -> "TransportContext":
        context = self._new_context(worker_id, [r for r in rails if self.serves(r)])
        with self._lock:
            self._contexts.append(context)
        return context

    @property
    def is_fatal(self) -> bool:
        return self._fatal_reason is not None

    @property
    def fatal_reason(self) -> Optional[str]:
        return self._fatal_reason

    def latch_fatal(self, reason: str) -> None:
        with self._lock:
            if self._fatal_reason is not None:
                return
            self._fatal_reason = reason or "fatal"
            contexts = list(self._contexts)
        logger.error(f"Backend {self.backend_id} latched fatal: {reason}")
        for context in contexts:
            context._on_fatal()


class TransportContext(ABC):
    """Submission and completion queues for the rails one worker owns on one backend."""

    def __init__(self, backend: TransportBackend, worker_id: int, rails: Sequence[Rail]):
        self.backend = backend
        self.worker_id = worker_id
        self.rails: Dict[str, Rail] = {r.rail_id: r for r in rails}
        self.clock = backend.clock

    def _validate(self, requests: Sequence[SliceWorkRequest]) -> List[Tuple[SliceWorkRequest, Segment, Segment]]:
        if not requests:
            raise ValueError("post_slices needs at least one request")
        if self.backend.is_fatal:
            raise FatalBackendError(self.backend.backend_id, self.backend.fatal_reason)
        caps = self.backend.capabilities
        resolved = []
        for request in requests:
            if request.local_rail not in self.rails:
                raise CapabilityMismatch(
                    f"{caps.backend_id} worker {self.worker_id} does not own rail {request.local_rail}"
                )
            if request.length < 1 or request.length > caps.max_post_size:
                raise CapabilityMismatch(f"{caps.backend_id} cannot post {request.length} bytes")
            src = self.backend.registry.get(request.src_segment)
            dst = self.backend.registry.get(request.dst_segment)
            if not caps.covers(src.medium, dst.medium, request.direction):
                raise CapabilityMismatch(
                    f"{caps.backend_id} does not serve {src.medium.value}->{dst.medium.value} {request.direction.value}"
                )
            resolved.append((request, src, dst))
        return resolved

    @abstractmethod
    def post_slices(self, requests: Sequence[SliceWorkRequest]) -> int:
        pass

    @abstractmethod
    def poll_completions(self, max_events: int) -> List[CompletionEvent]:
        pass

    def next_due_time(self) -> Optional[float]:
        return None

    def cancel(self, slice_id: int, attempt: int) -> bool:
        """
        Withdraw a posted slice whose owner gave up on it (timeout).

        Returns:
            bool: True if its bytes will not land; False once they may already be on the wire
        """
        return False

    def _on_fatal(self) -> None:
        pass

    def close(self) -> None:
        pass


class RailTimeline:
    """FIFO service model of one rail: each slice starts when the previous one drains."""

    def __init__(self):
        self.busy_until = 0.0

    def reserve(self, now: float, service_s: float) -> float:
        start = max(now, self.busy_until)
        self.busy_until = start + service_s
        return start


@dataclass(order=True)
class _Deferred:
    due: float
    seq: int
    request: SliceWorkRequest = field(compare=False)
    src: Segment = field(compare=False)
    dst: Segment = field(compare=False)
    status: CompletionStatus = field(compare=False)
    copy_length: int = field(compare=False)
    posted_at: float = field(compare=False)
    emit: bool = field(compare=False, default=True)
    cancelled: bool = field(compare=False, default=False)


class DeferredContext(TransportContext):
    """
    Completions scheduled at modeled times and released by ``poll_completions``.

    Payload bytes move when a completion comes due, so an observer never sees
    data land before its modeled completion time.
    """

    def __init__(self, backend: TransportBackend, worker_id: int, rails: Sequence[Rail]):
        super().__init__(backend, worker_id, rails)
        self._heap: List[_Deferred] = []
        self._seq = itertools.count()
        self._pending_lock = threading.Lock()
        self.inflight: Dict[str, int] = defaultdict(int)

    def _defer(self, due: float, request: SliceWorkRequest, src: Segment, dst: Segment,
               status: CompletionStatus, copy_length: int, posted_at: float, emit: bool = True) -> None:
        with self._pending_lock:
            heapq.heappush(self._heap, _Deferred(due, next(self._seq), request, src, dst,
                                                 status, copy_length, posted_at, emit))
            self.inflight[request.local_rail] += 1

    def poll_completions(self, max_events: int) -> List[CompletionEvent]:
        now = self.clock.now()
        events: List[CompletionEvent] = []
        while len(events) < max_events:
            with self._pending_lock:
                if not self._heap or self._heap[0].due > now:
                    break
                item = heapq.heappop(self._heap)
                self.inflight[item.request.local_rail] -= 1
            request = item.request
            moved = copy_bytes(item.src, request.src_offset, item.dst, request.dst_offset, item.copy_length)
            if not item.emit:
                continue
            events.append(CompletionEvent(
                slice_id=request.slice_id,
                batch_id=request.batch_id,
                attempt=request.attempt,
                status=item.status,
                rail_id=request.local_rail,
                t_obs=max(item.due - item.posted_at, MIN_SERVICE_TIME_S),
                bytes_moved=moved if item.src.materialized else item.copy_length,
                completed_at=item.due,
            ))
        return events

    def next_due_time(self) -> Optional[float]:
        with self._pending_lock:
            return self._heap[0].due if self._heap else None

    def cancel(self, slice_id: int, attempt: int) -> bool:
        # the entry keeps its place so the rail stays busy until its modeled end
        with self._pending_lock:
            for item in self._heap:
                if item.request.slice_id == slice_id and item.request.attempt == attempt:
                    item.copy_length = 0
                    item.emit = False
                    item.cancelled = True
                    return True
        return False

    def _on_fatal(self) -> None:
        now = self.clock.now()
        with self._pending_lock:
            for item in self._heap:
                item.due = min(item.due, now)
                item.status = CompletionStatus.FAILED
                item.copy_length = 0
                item.emit = not item.cancelled
            heapq.heapify(self._heap)
