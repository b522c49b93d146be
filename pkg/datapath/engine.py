"""
The transfer engine: public API and the glue between planning, scheduling,
resilience and the per-worker datapath.

Under the virtual clock everything runs on the caller's thread: ``step``
drives each worker once and, when nothing moved, jumps time to the next
due event. Under the real clock every worker runs its own thread.
"""
import heapq
import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional, Sequence, Tuple

from clock import RealClock, VirtualClock
from config import EngineConfig
from datapath.batch import BatchRegistry, BatchStatus
from datapath.transfer import Fragment, Transfer, WorkUnit
from datapath.worker import Worker
from errors import AllRoutesExhausted, EngineShuttingDown, NoEligibleDevice, NoRemoteRail
from orchestrator.plan import Orchestrator, StageLeg
from orchestrator.staging import ChunkRun, StagingManager
from resilience.health import HealthMonitor, HealthTransition
from resilience.prober import Prober
from resilience.retry import RetryPolicy, select_retry_pair
from scheduler.cost_model import CostModel
from scheduler.load_board import GlobalLoadBoard
from scheduler.policy import make_policy
from scheduler.remote_map import map_remote
from scheduler.slicing import decompose
from telemetry.stats import TelemetryCollector, TelemetrySnapshot
from topology.enums import ClockMode, CompletionStatus, Direction, RailKind
from topology.graph import TopologyGraph
from topology.segments import Segment, SegmentDescriptor, SegmentRegistry
from transports import BACKEND_KINDS, FaultSchedule, SimulatedBackend
from transports.base import CompletionEvent
from utils import setup_logger

logger = setup_logger(__name__)


@dataclass(frozen=True)
class TransferRequest:
    src_segment: str
    src_offset: int
    dst_segment: str
    dst_offset: int
    length: int
    direction: Direction = Direction.WRITE


class TransferEngine:
    """
    Multi-rail transfer engine.

    Applications register segments, allocate a batch, submit transfers into
    it and poll (or wait on) the batch. Submission never waits for data to
    move; it only plans, slices and enqueues.
    """

    def __init__(self, graph: TopologyGraph, config: Optional[EngineConfig] = None, clock=None,
                 load_board: Optional[GlobalLoadBoard] = None, fault_schedule: Optional[FaultSchedule] = None,
                 file_root: Optional[str] = None, engine_id: str = "engine"):
        self.graph = graph
        self.config = config or EngineConfig()
        if clock is None:
            clock = VirtualClock() if self.config.clock is ClockMode.VIRTUAL else RealClock()
        self.clock = clock
        self.engine_id = engine_id
        self.load_board = load_board

        self.registry = SegmentRegistry(graph, file_root)
        self.backends = [
            BACKEND_KINDS[spec.kind](spec, graph, self.registry, clock)
            for spec in self.config.backends if spec.enabled
        ]
        if fault_schedule is not None:
            for backend in self.backends:
                if isinstance(backend, SimulatedBackend):
                    backend.set_faults(fault_schedule)
        self.registry.bind_backends(self.backends)
        self._backends = {backend.backend_id: backend for backend in self.backends}

        rails = [graph.rails[rail_id] for rail_id in graph.rail_order]
        self.cost = CostModel(rails, self.config.scheduler, clock.now())
        self.policy = make_policy(self.cost, self.config.scheduler)
        self.retry_policy = RetryPolicy.from_config(self.config.resilience, self.config.timeout_s)

        count = self.config.datapath.workers or len(rails)
        count = max(1, min(count, len(rails)))
        self.telemetry = TelemetryCollector(graph.rail_order, self.config.telemetry.window_s,
                                            self.config.telemetry.enabled, workers=count)
        self.health = HealthMonitor(graph.rail_order, self.config.resilience, self.cost, clock,
                                    on_transition=self._on_transition)
        self.orchestrator = Orchestrator(graph, self.registry, self.backends,
                                         self.config.scheduler, self.config.staging)
        self.staging = StagingManager(self.config.staging, self._launch_leg)
        self._ids = itertools.count(1)
        self.prober = Prober(graph, self.registry, self.backends, self.health, self.config.resilience,
                             self._next_id)
        self.batches = BatchRegistry()

        self.prober.ensure_scratch()
        kinds = {backend.capabilities.rail_kind for backend in self.backends}
        if RailKind.NETWORK in kinds and len(kinds) > 1:
            self.staging.register_pools(self.registry, graph.nodes)

        self.workers: List[Worker] = []
        for index in range(count):
            owned = [rail for i, rail in enumerate(rails) if i % count == index]
            self.workers.append(Worker(index, self, owned))
        self._owner: Dict[str, Worker] = {
            rail_id: self.workers[i % count] for i, rail_id in enumerate(graph.rail_order)
        }

        self._transfers: Dict[int, Transfer] = {}
        self._transfer_ids = itertools.count(1)
        self._retries: List[Tuple[float, int, Fragment]] = []
        self._parked: List[Fragment] = []
        self._parked_key: Tuple[int, int] = (0, 0)
        self._overflow: Deque[Fragment] = deque()
        self._last_publish: Optional[float] = None
        self._lock = threading.RLock()
        self._started = False
        self._stopped = False
        logger.info(f"Engine {engine_id}: {len(rails)} rails, {count} workers, "
                    f"backends {[b.backend_id for b in self.backends]}, {self.config.clock.value} clock")

    # ------------------------------------------------------------- lifecycle

    def start(self) -> "TransferEngine":
        if self._started:
            return self
        for backend in self.backends:
            backend.start()
        self._started = True
        if not self.clock.virtual:
            for worker in self.workers:
                worker.start()
        return self

    def shutdown(self) -> None:
        if self._stopped:
            return
        self._stopped = True
        for worker in self.workers:
            worker.stop()
        for backend in self.backends:
            backend.stop()
        self.registry.close()
        logger.info(f"Engine {self.engine_id} shut down")

    def __enter__(self) -> "TransferEngine":
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.shutdown()

    def _check_running(self) -> None:
        if self._stopped:
            raise EngineShuttingDown(f"engine {self.engine_id} is shut down")
        if not self._started:
            self.start()

    def _next_id(self) -> int:
        return next(self._ids)

    # ------------------------------------------------------------ public API

    def register_segment(self, descriptor: SegmentDescriptor) -> Segment:
        self._check_running()
        return self.registry.register(descriptor)

    def allocate_batch(self, capacity_hint: int = 0) -> int:
        self._check_running()
        return self.batches.allocate(capacity_hint).batch_id

    def submit_transfer(self, batch_id: int, src_segment: str, src_offset: int, dst_segment: str,
                        dst_offset: int, length: int, direction: Direction = Direction.WRITE) -> int:
        """
        Plan, slice and enqueue one transfer into a batch.

        Returns:
            int: transfer id

        Raises:
            UnknownBatch, BatchClosed, EngineShuttingDown: batch problems
            UnknownSegment, InvalidRange: bad endpoints
            NoRoute: nothing can move these bytes
        """
        request = TransferRequest(src_segment, src_offset, dst_segment, dst_offset, length, direction)
        return self.submit_transfers(batch_id, [request])[0]

    def submit_transfers(self, batch_id: int, requests: Sequence[TransferRequest]) -> List[int]:
        """Register every transfer of the group before any slice is enqueued."""
        self._check_running()
        batch = self.batches.get(batch_id)
        prepared = []
        for request in requests:
            src = self.registry.get(request.src_segment)
            dst = self.registry.get(request.dst_segment)
            transfer_id = next(self._transfer_ids)
            plan = self.orchestrator.build_plan(transfer_id, src, request.src_offset, dst, request.dst_offset,
                                                request.length, request.direction)
            transfer = Transfer(transfer_id, batch, src, request.src_offset, dst, request.dst_offset,
                                request.length, request.direction, plan)
            route = plan.active
            if route.staged:
                chunk = route.chunk_size
                pieces = [(o, min(chunk, request.length - o)) for o in range(0, request.length, chunk)]
            else:
                pieces = decompose(request.length, self.config.scheduler)
            transfer.cut(pieces)
            prepared.append(transfer)

        for transfer in prepared:
            batch.add_transfer(transfer.transfer_id, len(transfer.units))
            with self._lock:
                self._transfers[transfer.transfer_id] = transfer
        for transfer in prepared:
            logger.debug(f"Transfer {transfer.transfer_id}: {transfer.length} bytes in "
                         f"{len(transfer.units)} units via {transfer.plan.active.backend_ids}")
            self._execute(transfer, transfer.units, transfer.plan.active_index, blocking=True)
        return [transfer.transfer_id for transfer in prepared]

    def get_batch_status(self, batch_id: int) -> BatchStatus:
        return self.batches.get(batch_id).status()

    def wait_batch(self, batch_id: int, timeout: Optional[float] = None) -> BatchStatus:
        """
        Block until the batch is complete or failed, or ``timeout`` seconds pass.

        Under the virtual clock this drives the engine itself and the timeout
        is measured in virtual time.
        """
        batch = self.batches.get(batch_id)
        if not self.clock.virtual:
            batch.done.wait(timeout)
            return batch.status()
        deadline = None if timeout is None else self.clock.now() + timeout
        while not batch.done.is_set():
            if deadline is not None and self.clock.now() >= deadline:
                break
            if not self.step():
                break
        return batch.status()

    def free_batch(self, batch_id: int) -> None:
        self.batches.free(batch_id)

    def latch_backend_fatal(self, backend_id: str, reason: str = "latched by operator") -> None:
        backend = self._backends.get(backend_id)
        if backend is None:
            raise KeyError(f"unknown backend: {backend_id}")
        backend.latch_fatal(reason)

    def telemetry_snapshot(self) -> TelemetrySnapshot:
        self.telemetry.sample_queues(self.clock.now(), self.cost.queue_snapshot())
        return self.telemetry.snapshot()

    @property
    def peak_stage_overlap(self) -> int:
        return self.staging.peak_overlap

    # --------------------------------------------------------------- driving

    def step(self) -> bool:
        """
        Run every worker once; if nothing moved, advance to the next due event.

        Returns:
            bool: False once the engine is idle with nothing scheduled
        """
        if not self.clock.virtual:
            raise RuntimeError("step() drives the virtual clock only; real-clock workers run on threads")
        self._check_running()
        progress = False
        for worker in self.workers:
            progress |= worker.run_guarded()
        if progress:
            return True
        due = self._next_event_time()
        if due is None:
            return False
        if due > self.clock.now():
            self.clock.advance_to(due)
        else:
            # completions owed by a wall-clock transport
            time.sleep(self.config.datapath.idle_sleep_s)
        return True

    def run_until_idle(self, limit: Optional[float] = None) -> None:
        """Step until nothing is left to do, or virtual time passes ``limit``."""
        while self.step():
            if limit is not None and self.clock.now() >= limit:
                break

    def _next_event_time(self) -> Optional[float]:
        times = [worker.next_event_time() for worker in self.workers]
        with self._lock:
            if self._retries:
                times.append(self._retries[0][0])
        times.append(self.health.next_probe_time())
        return min((t for t in times if t is not None), default=None)

    # ------------------------------------------------------------- execution

    def _execute(self, transfer: Transfer, units: List[WorkUnit], route_index: int, blocking: bool) -> None:
        route = transfer.plan.routes[route_index]
        for unit in units:
            unit.route_index = route_index
        if route.staged:
            transfer.jobs.append(self.staging.submit(transfer, route, units))
            return
        for unit in units:
            pieces = decompose(unit.length, self.config.scheduler)
            fragments = [
                Fragment(
                    fragment_id=self._next_id(),
                    owner=unit,
                    unit=unit,
                    generation=unit.generation,
                    backend_id=route.backend_id,
                    entries=route.entries,
                    src_segment=transfer.src.segment_id,
                    src_offset=transfer.src_offset + unit.offset + offset,
                    dst_segment=transfer.dst.segment_id,
                    dst_offset=transfer.dst_offset + unit.offset + offset,
                    length=length,
                    direction=transfer.direction,
                    slice_offset=unit.offset + offset,
                )
                for offset, length in pieces
            ]
            with transfer.lock:
                unit.pending = len(fragments)
            for fragment in fragments:
                self._dispatch_new(fragment, blocking)

    def _launch_leg(self, chunk: ChunkRun, leg: StageLeg, src_offset: int, dst_offset: int, length: int) -> int:
        """Turn one leg of a staged chunk into scheduled fragments."""
        unit = chunk.unit
        fragments = [
            Fragment(
                fragment_id=self._next_id(),
                owner=chunk,
                unit=unit,
                generation=chunk.generation,
                backend_id=leg.backend_id,
                entries=leg.entries,
                src_segment=leg.src_segment,
                src_offset=src_offset + offset,
                dst_segment=leg.dst_segment,
                dst_offset=dst_offset + offset,
                length=piece,
                direction=leg.direction,
                slice_offset=unit.offset + offset,
            )
            for offset, piece in decompose(length, self.config.scheduler)
        ]
        for fragment in fragments:
            chunk.job.fragment_created(chunk.slot)
            self._dispatch_new(fragment, blocking=False)
        return len(fragments)

    def _global_load(self):
        if self.load_board is None or self.config.scheduler.diffusion_weight <= 0:
            return None
        return self.load_board.global_load(self.clock.now())

    def _dispatch_new(self, fragment: Fragment, blocking: bool = False) -> None:
        """Scheduler path: predictive rail choice, then the remote rail."""
        try:
            choice = self.policy.select(fragment.length, fragment.slice_offset, fragment.candidates(),
                                        self._global_load())
        except NoEligibleDevice:
            self._park(fragment)
            return
        try:
            remote = map_remote(self.graph, choice.rail_id, fragment.entries, self.health.is_healthy)
        except NoRemoteRail:
            self.cost.release(choice.rail_id, fragment.length)
            self._park(fragment)
            return
        fragment.local_rail = choice.rail_id
        fragment.remote_rail = remote
        fragment.predicted = choice.predicted
        fragment.queued_at_dispatch = choice.queued_at_dispatch
        fragment.selected_at = self.clock.now()
        fragment.attempt += 1
        fragment.spent += 1
        self._enqueue(fragment, blocking)

    def _dispatch_retry(self, fragment: Fragment) -> None:
        """Retry path: best healthy pair, bypassing the predictive model."""
        if fragment.stale:
            self._retire(fragment)
            return
        if self._backends[fragment.backend_id].is_fatal:
            self._substitute(fragment.unit.transfer, fragment.backend_id)
            self._retire(fragment)
            return
        entry = select_retry_pair(self.graph, fragment.entries, fragment.blacklist, self.health, self.cost,
                                  self.config.scheduler)
        if entry is None:
            self._park(fragment)
            return
        choice = self.cost.charge(entry.local_rail, fragment.length)
        fragment.local_rail = entry.local_rail
        fragment.remote_rail = entry.remote_rail
        fragment.predicted = choice.predicted
        fragment.queued_at_dispatch = choice.queued_at_dispatch
        fragment.selected_at = self.clock.now()
        fragment.attempt += 1
        fragment.spent += 1
        self._enqueue(fragment, blocking=False)

    def _enqueue(self, fragment: Fragment, blocking: bool) -> None:
        worker = self._owner[fragment.local_rail]
        if blocking:
            worker.ring.push(fragment)
        elif not worker.ring.try_push(fragment):
            with self._lock:
                self._overflow.append(fragment)

    def _park(self, fragment: Fragment) -> None:
        logger.debug(f"Fragment {fragment.fragment_id} parked: no healthy rail pair")
        with self._lock:
            self._parked.append(fragment)

    # ----------------------------------------------------------- completions

    def on_event(self, worker: Worker, event: CompletionEvent) -> None:
        fragment = worker.inflight.get(event.slice_id)
        if fragment is None or fragment.attempt != event.attempt:
            return
        del worker.inflight[event.slice_id]
        worker.wheel.cancel(event.slice_id)
        self.telemetry.record_completion(worker.worker_id, event.rail_id, event.status, fragment.length,
                                         event.t_obs, event.completed_at)
        ok = event.status is CompletionStatus.OK

        if fragment.is_probe:
            self.cost.release(fragment.local_rail, fragment.length)
            self.health.probe_result(fragment.local_rail, ok)
            return

        if ok:
            # the prediction covers the bytes queued ahead at selection, backlog included
            observed = max(event.t_obs, event.completed_at - fragment.selected_at)
            self.cost.feedback(fragment.local_rail, observed, fragment.predicted, fragment.length,
                               fragment.queued_at_dispatch)
            self.health.observe(event, fragment.predicted)
            if not fragment.stale and fragment.owner.fragment_done(fragment):
                self._unit_finished(fragment.unit)
            self._retire(fragment)
            return

        self.cost.release(fragment.local_rail, fragment.length)
        if not self._backends[fragment.backend_id].is_fatal:
            # a latched backend says nothing about the rail
            self.health.observe(event, fragment.predicted)
        self._after_failure(fragment)

    def _after_failure(self, fragment: Fragment) -> None:
        """
        Blacklist the failed pair and schedule a retry, park or escalate.

        A fragment past ``max_attempts`` still retries while some untried
        (local, remote) pair is left, so its attempts stay within
        ``max_attempts`` plus the number of distinct pairs.
        """
        fragment.blacklist.add((fragment.local_rail, fragment.remote_rail))
        if fragment.stale:
            self._retire(fragment)
            return
        transfer = fragment.unit.transfer
        if self._backends[fragment.backend_id].is_fatal:
            self._substitute(transfer, fragment.backend_id)
            self._retire(fragment)
            return
        entry = select_retry_pair(self.graph, fragment.entries, fragment.blacklist, self.health, self.cost,
                                  self.config.scheduler)
        if entry is None:
            # nothing healthy: wait for a readmission without spending an attempt
            fragment.spent -= 1
            self._park(fragment)
            return
        fresh = (entry.local_rail, entry.remote_rail) not in fragment.blacklist
        if self.retry_policy.exhausted(fragment.spent) and not fresh:
            logger.warning(f"Fragment {fragment.fragment_id} of transfer {transfer.transfer_id}: "
                           f"{fragment.spent} attempts failed, escalating")
            self._substitute(transfer, fragment.backend_id)
            self._retire(fragment)
            return
        due = self.clock.now() + self.retry_policy.delay(fragment.spent)
        with self._lock:
            heapq.heappush(self._retries, (due, fragment.fragment_id, fragment))

    def _unit_finished(self, unit: WorkUnit) -> None:
        transfer = unit.transfer
        if transfer.batch.slice_done(transfer.transfer_id):
            logger.debug(f"Batch {transfer.batch.batch_id} complete")
        if transfer.unit_finished():
            with self._lock:
                self._transfers.pop(transfer.transfer_id, None)

    def _retire(self, fragment: Fragment) -> None:
        if fragment.owner is not None:
            fragment.owner.fragment_retired(fragment)

    def drop_stale(self, fragment: Fragment) -> None:
        self.cost.release(fragment.local_rail, fragment.length)
        self._retire(fragment)

    def post_failed(self, fragment: Fragment, exc: Exception) -> None:
        """The backend latched fatal between dispatch and post."""
        self.cost.release(fragment.local_rail, fragment.length)
        if fragment.is_probe:
            self.health.probe_result(fragment.local_rail, False)
            return
        if fragment.stale:
            self._retire(fragment)
            return
        self._substitute(fragment.unit.transfer, fragment.backend_id)
        self._retire(fragment)

    def post_rejected(self, fragment: Fragment, exc: Exception) -> None:
        """A backend refused the request outright; retrying cannot help."""
        self.cost.release(fragment.local_rail, fragment.length)
        if fragment.is_probe:
            logger.warning(f"Probe on {fragment.local_rail} rejected: {exc}")
            self.health.probe_result(fragment.local_rail, False)
            return
        if not fragment.stale:
            self._fail_transfer(fragment.unit.transfer, str(exc))
        self._retire(fragment)

    # ----------------------------------------------------------- escalation

    def _substitute(self, transfer: Transfer, failed_backend: str) -> None:
        with transfer.plan.lock:
            if transfer.closed:
                return
            previous = transfer.plan.active_index
            try:
                self.orchestrator.substitute_backend(transfer.plan, failed_backend)
            except AllRoutesExhausted as exc:
                self._fail_transfer(transfer, str(exc))
                return
            if transfer.plan.active_index == previous:
                return
            for job in transfer.jobs:
                job.abandon()
            units = []
            with transfer.lock:
                for unit in transfer.units:
                    if not unit.done:
                        unit.generation += 1
                        units.append(unit)
            self._execute(transfer, units, transfer.plan.active_index, blocking=False)

    def _fail_transfer(self, transfer: Transfer, reason: str) -> None:
        with transfer.lock:
            if transfer.closed:
                return
            transfer.closed = True
        for job in transfer.jobs:
            job.abandon()
        with self._lock:
            self._transfers.pop(transfer.transfer_id, None)
        if transfer.batch.fail(reason):
            logger.error(f"Batch {transfer.batch.batch_id} failed: {reason}")

    def worker_crashed(self, worker: Worker, exc: Exception) -> None:
        logger.exception(f"Worker {worker.worker_id} crashed: {exc}")
        for fragment in worker.drain():
            self.cost.release(fragment.local_rail, fragment.length)
            if fragment.is_probe:
                self.health.probe_result(fragment.local_rail, False)
            elif not fragment.stale:
                self._fail_transfer(fragment.unit.transfer, f"worker {worker.worker_id} crashed: {exc}")
            self._retire(fragment)

    def _on_transition(self, transition: HealthTransition) -> None:
        self.telemetry.record_transition(transition.at, transition.rail_id, transition.previous,
                                         transition.current, transition.reason)

    # ---------------------------------------------------------- maintenance

    def maintenance(self) -> bool:
        """Background duties, run by worker 0 after each pass."""
        now = self.clock.now()
        progress = False

        with self._lock:
            pending, self._overflow = self._overflow, deque()
            for fragment in pending:
                if self._owner[fragment.local_rail].ring.try_push(fragment):
                    progress = True
                else:
                    self._overflow.append(fragment)

        due = []
        with self._lock:
            while self._retries and self._retries[0][0] <= now:
                due.append(heapq.heappop(self._retries)[2])
        for fragment in due:
            self._dispatch_retry(fragment)
        progress |= bool(due)

        key = (self.health.version, sum(b.is_fatal for b in self.backends))
        parked = []
        with self._lock:
            if self._parked and key != self._parked_key:
                parked, self._parked = self._parked, []
            self._parked_key = key
        for fragment in parked:
            if fragment.stale:
                self._retire(fragment)
            elif fragment.attempt == 0:
                self._dispatch_new(fragment)
            else:
                self._dispatch_retry(fragment)
        progress |= bool(parked)

        for backend_id, request in self.prober.probe_excluded(now):
            choice = self.cost.charge(request.local_rail, request.length)
            probe = Fragment(
                fragment_id=request.slice_id,
                owner=None,
                unit=None,
                generation=0,
                backend_id=backend_id,
                entries=(),
                src_segment=request.src_segment,
                src_offset=request.src_offset,
                dst_segment=request.dst_segment,
                dst_offset=request.dst_offset,
                length=request.length,
                direction=request.direction,
                attempt=request.attempt,
                local_rail=request.local_rail,
                remote_rail=request.remote_rail,
                predicted=choice.predicted,
                queued_at_dispatch=choice.queued_at_dispatch,
                selected_at=now,
                is_probe=True,
            )
            self._enqueue(probe, blocking=False)
            progress = True

        progress |= self.staging.admit_waiting() > 0

        reset = self.cost.periodic_reset(now)
        if reset:
            self.health.clear_backoff(reset)
            logger.debug(f"Periodic reset of {len(reset)} rails")

        if self.load_board is not None:
            period = self.config.scheduler.publish_period_s
            if self._last_publish is None or now - self._last_publish >= period:
                self.load_board.publish(self.engine_id, self.cost.queue_snapshot(), now)
                self._last_publish = now

        if self.telemetry.sample_due(now):
            self.telemetry.sample_queues(now, self.cost.queue_snapshot())
        return progress
