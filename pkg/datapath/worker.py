"""
Datapath workers.

Each worker owns a fixed set of rails: one submission ring, one transport
context per backend over those rails, the in-flight table for its fragments
and a timeout wheel. Nothing a worker touches on its hot path is shared with
another worker except the cost model counters.
"""
import threading
import time
from collections import deque
from typing import TYPE_CHECKING, Deque, Dict, List, Sequence

from errors import CapabilityMismatch, FatalBackendError
from datapath.ring import SubmissionRing
from datapath.timeouts import TimeoutWheel
from datapath.transfer import Fragment
from topology.enums import CompletionStatus
from topology.graph import Rail
from transports.base import CompletionEvent, TransportContext
from utils import setup_logger

if TYPE_CHECKING:
    from datapath.engine import TransferEngine

logger = setup_logger(__name__)


class Worker:
    def __init__(self, worker_id: int, engine: "TransferEngine", rails: Sequence[Rail]):
        self.worker_id = worker_id
        self.engine = engine
        self.rail_ids = [rail.rail_id for rail in rails]
        config = engine.config.datapath
        self.burst = config.burst
        self.timeout_s = engine.config.timeout_s
        self.ring: SubmissionRing[Fragment] = SubmissionRing(
            config.ring_capacity, config.spin_budget, config.idle_sleep_s,
            on_full=self.absorb if engine.clock.virtual else None,
        )
        self.backlog: Deque[Fragment] = deque()
        self.contexts: Dict[str, TransportContext] = {
            backend.backend_id: backend.open_context(worker_id, rails) for backend in engine.backends
        }
        self.inflight: Dict[int, Fragment] = {}
        # popped from the ring, not yet posted or backlogged
        self._holding: List[Fragment] = []
        self.wheel = TimeoutWheel(config.wheel_bucket_s)
        self.posts = 0
        self._stop = threading.Event()
        self._thread = None

    def __repr__(self) -> str:
        return f"Worker({self.worker_id}, rails={self.rail_ids})"

    def absorb(self) -> None:
        """Move the whole ring into the backlog (single-threaded driving only)."""
        self.backlog.extend(self.ring.pop_many(len(self.ring)))

    def drain(self) -> List[Fragment]:
        """Take every fragment this worker holds, leaving it empty."""
        held: Dict[int, Fragment] = {}
        for fragment in (self._holding + list(self.inflight.values()) + list(self.backlog)
                         + self.ring.pop_many(len(self.ring))):
            held.setdefault(fragment.fragment_id, fragment)
        for fragment_id in self.inflight:
            self.wheel.cancel(fragment_id)
        self.inflight.clear()
        self.backlog.clear()
        self._holding = []
        return list(held.values())

    # ------------------------------------------------------------------ loop

    def run_once(self) -> bool:
        """One pass: post, poll, expire and, on worker 0, maintenance. True if anything moved."""
        progress = False
        work: List[Fragment] = []
        while self.backlog and len(work) < self.burst:
            work.append(self.backlog.popleft())
        if len(work) < self.burst:
            work.extend(self.ring.pop_many(self.burst - len(work)))
        if work:
            progress |= self._post(work)
        progress |= self._poll()
        progress |= self._expire()
        if self.worker_id == 0:
            progress |= self.engine.maintenance()
        return progress

    def run_guarded(self) -> bool:
        try:
            return self.run_once()
        except Exception as exc:
            self.engine.worker_crashed(self, exc)
            return True

    def _post(self, work: List[Fragment]) -> bool:
        progress = False
        groups: Dict[str, List[Fragment]] = {}
        for fragment in work:
            if fragment.stale:
                self.engine.drop_stale(fragment)
                progress = True
                continue
            groups.setdefault(fragment.backend_id, []).append(fragment)
        self._holding = [fragment for fragments in groups.values() for fragment in fragments]

        rejected: List[Fragment] = []
        for backend_id, fragments in groups.items():
            context = self.contexts[backend_id]
            try:
                accepted = context.post_slices([f.to_request() for f in fragments])
            except FatalBackendError as exc:
                for fragment in fragments:
                    self.engine.post_failed(fragment, exc)
                progress = True
                continue
            except CapabilityMismatch as exc:
                for fragment in fragments:
                    self.engine.post_rejected(fragment, exc)
                progress = True
                continue
            self.posts += 1
            now = self.engine.clock.now()
            for fragment in fragments[:accepted]:
                fragment.dispatched_at = now
                self.inflight[fragment.fragment_id] = fragment
                self.wheel.add(fragment.fragment_id, now + self.timeout_s, fragment.attempt)
                self.engine.telemetry.record_post(self.worker_id, fragment.local_rail, fragment.length)
            rejected.extend(fragments[accepted:])
            progress |= accepted > 0
        # backend queue full: retry these first next pass
        self.backlog.extendleft(reversed(rejected))
        self._holding = []
        return progress

    def _poll(self) -> bool:
        progress = False
        for context in self.contexts.values():
            while True:
                events = context.poll_completions(self.burst)
                for event in events:
                    self.engine.on_event(self, event)
                progress |= bool(events)
                if len(events) < self.burst:
                    break
        return progress

    def _expire(self) -> bool:
        now = self.engine.clock.now()
        expired = self.wheel.expire(now)
        for fragment_id, attempt in expired:
            fragment = self.inflight.get(fragment_id)
            if fragment is None or fragment.attempt != attempt:
                continue
            logger.debug(f"Fragment {fragment_id} attempt {attempt} timed out on {fragment.local_rail}")
            # a late completion must not write into a slot or buffer that has moved on
            self.contexts[fragment.backend_id].cancel(fragment_id, attempt)
            self.engine.on_event(self, CompletionEvent(
                slice_id=fragment_id,
                batch_id=fragment.batch_id,
                attempt=attempt,
                status=CompletionStatus.TIMEOUT,
                rail_id=fragment.local_rail,
                t_obs=now - fragment.dispatched_at,
                bytes_moved=0,
                completed_at=now,
            ))
        return bool(expired)

    def next_event_time(self):
        times = [context.next_due_time() for context in self.contexts.values()]
        times.append(self.wheel.next_deadline())
        return min((t for t in times if t is not None), default=None)

    # --------------------------------------------------------------- threads

    def start(self) -> None:
        self._thread = threading.Thread(target=self._loop, name=f"railspray-worker-{self.worker_id}", daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        config = self.engine.config.datapath
        idle = 0
        while not self._stop.is_set():
            if self.run_guarded():
                idle = 0
                continue
            idle += 1
            if idle > config.spin_budget:
                time.sleep(config.idle_sleep_s)

    def stop(self, timeout: float = 5.0) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None
