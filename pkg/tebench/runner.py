"""
Benchmark drivers.

Each submitter issues one batch of ``batch`` transfers of ``block`` bytes,
waits for it, and issues the next, like a synchronous client thread. Under
the virtual clock the submitters are logical: they are polled in lockstep
with engine steps, so a run is bit-reproducible for a given seed. Every
cell gets a fresh engine; the first ``warmup`` batches of each submitter
are left out of the statistics.
"""
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from datapath.engine import TransferEngine, TransferRequest
from errors import ScenarioError
from tebench.scenario import BenchScenario
from telemetry.export import timeline_rows
from telemetry.stats import TelemetrySnapshot
from topology.enums import BatchState, ClockMode, HealthState, Medium
from topology.graph import TopologyGraph, load_topology_file
from topology.segments import SegmentDescriptor
from transports.faults import FaultSchedule
from utils import human_bytes, setup_logger

logger = setup_logger(__name__)

SRC_SEGMENT = "bench/src"
DST_SEGMENT = "bench/dst"
SENSITIVITY_PENALTIES = (1.0, 3.0, 1e6)
WAIT_TIMEOUT_S = 60.0


@dataclass
class CellResult:
    policy: str
    penalty: Optional[float]
    block: int
    batch: int
    threads: int
    latencies_s: List[float]
    bytes_moved: int
    duration_s: float
    failures: int
    snapshot: TelemetrySnapshot
    tiers: Dict[str, int]

    @property
    def iterations(self) -> int:
        return len(self.latencies_s)

    @property
    def throughput_gbps(self) -> float:
        return self.bytes_moved * 8 / self.duration_s / 1e9 if self.duration_s > 0 else 0.0

    def latency_us(self, q: float) -> float:
        if not self.latencies_s:
            return 0.0
        return float(np.percentile(np.asarray(self.latencies_s), q)) * 1e6

    @property
    def mean_us(self) -> float:
        return float(np.mean(self.latencies_s)) * 1e6 if self.latencies_s else 0.0

    def rail_bytes(self) -> Dict[str, int]:
        return {r: s.bytes_ok for r, s in self.snapshot.rails.items() if s.bytes_ok > 0}

    def tier_share(self, tier: int) -> float:
        """Fraction of network bytes carried by rails of ``tier`` (as seen from the source device)."""
        moved = {r: b for r, b in self.rail_bytes().items() if r in self.tiers}
        total = sum(moved.values())
        if total == 0:
            return 0.0
        return sum(b for r, b in moved.items() if self.tiers[r] == tier) / total

    @property
    def label(self) -> str:
        text = f"{self.policy} block={human_bytes(self.block)} batch={self.batch} threads={self.threads}"
        return text if self.penalty is None else f"{text} P={self.penalty:g}"


@dataclass
class SweepReport:
    scenario: BenchScenario
    cells: List[CellResult] = field(default_factory=list)

    def cell(self, block: int, batch: Optional[int] = None, penalty: Optional[float] = None) -> CellResult:
        for cell in self.cells:
            if cell.block == block and (batch is None or cell.batch == batch) and cell.penalty == penalty:
                return cell
        raise KeyError(f"no cell for block={block} batch={batch} penalty={penalty}")

    def best_penalty(self, block: int) -> Optional[float]:
        """The penalty with the lowest P99 at ``block``."""
        cells = [c for c in self.cells if c.block == block and c.penalty is not None]
        if not cells:
            return None
        return min(cells, key=lambda c: c.latency_us(99)).penalty


@dataclass
class TimelineReport:
    cell: CellResult
    rows: List[Dict]
    transitions: List

    def health_changes(self, rail_id: str) -> List[Tuple[float, HealthState]]:
        return [(t.at, t.current) for t in self.transitions if t.rail_id == rail_id]


@dataclass
class _Submitter:
    index: int
    issued: int = 0
    batch_id: Optional[int] = None
    started: float = 0.0


def _descriptor(graph: TopologyGraph, node_id: str, segment_id: str, length: int,
                materialize: bool) -> Tuple[SegmentDescriptor, Optional[str]]:
    node = graph.nodes[node_id]
    if node.devices:
        device = node.devices[0].device_id
        return SegmentDescriptor.single(segment_id, node_id, length, Medium.DEVICE, device_id=device,
                                        materialize=materialize), device
    return SegmentDescriptor.single(segment_id, node_id, length, materialize=materialize), None


class _Cell:
    """One engine, one (block, batch, penalty) combination."""

    def __init__(self, scenario: BenchScenario, block: int, batch: int, penalty: Optional[float] = None):
        self.scenario = scenario
        self.block = block
        self.batch = batch
        self.penalty = penalty
        self.graph = load_topology_file(scenario.fabric_path)
        faults = FaultSchedule.load(str(scenario.faults_path)) if scenario.faults else None
        self.engine = TransferEngine(self.graph, scenario.engine_config(penalty), fault_schedule=faults,
                                     engine_id="tebench")
        self.engine.start()

        nodes = list(self.graph.nodes)
        self.src_node = nodes[0]
        dst_node = nodes[1] if len(nodes) > 1 else nodes[0]
        self.region = block * batch
        length = self.region * scenario.threads
        materialize = scenario.clock is ClockMode.REAL
        src, self.device = _descriptor(self.graph, self.src_node, SRC_SEGMENT, length, materialize)
        dst, _ = _descriptor(self.graph, dst_node, DST_SEGMENT, length, materialize)
        self.engine.register_segment(src)
        self.engine.register_segment(dst)

        self.latencies: List[float] = []
        self.bytes_moved = 0
        self.failures = 0
        self.measure_start: Optional[float] = None
        self.measure_end = 0.0
        self._lock = threading.Lock()
        self.t0 = self.engine.clock.now()

    def _issue(self, submitter: _Submitter) -> None:
        engine = self.engine
        submitter.batch_id = engine.allocate_batch(self.batch)
        submitter.started = engine.clock.now()
        base = submitter.index * self.region
        engine.submit_transfers(submitter.batch_id, [
            TransferRequest(SRC_SEGMENT, base + k * self.block, DST_SEGMENT, base + k * self.block, self.block)
            for k in range(self.batch)
        ])
        submitter.issued += 1

    def _finished(self, submitter: _Submitter, now: float) -> bool:
        if self.scenario.duration_s is not None:
            return now - self.t0 >= self.scenario.duration_s
        return submitter.issued >= self.scenario.warmup + self.scenario.iters

    def _record(self, submitter: _Submitter, state: BatchState, now: float) -> None:
        with self._lock:
            if state is BatchState.FAILED:
                self.failures += 1
                return
            if submitter.issued <= self.scenario.warmup:
                return
            self.latencies.append(now - submitter.started)
            self.bytes_moved += self.region
            if self.measure_start is None or submitter.started < self.measure_start:
                self.measure_start = submitter.started
            self.measure_end = max(self.measure_end, now)

    def run_virtual(self) -> None:
        engine = self.engine
        active = [_Submitter(i) for i in range(self.scenario.threads)]
        for submitter in active:
            self._issue(submitter)
        while active:
            progressed = engine.step()
            now = engine.clock.now()
            still = []
            for submitter in active:
                status = engine.get_batch_status(submitter.batch_id)
                if status.state is BatchState.IN_FLIGHT:
                    still.append(submitter)
                    continue
                engine.free_batch(submitter.batch_id)
                self._record(submitter, status.state, now)
                if not self._finished(submitter, now):
                    self._issue(submitter)
                    still.append(submitter)
            active = still
            if active and not progressed:
                raise ScenarioError(f"engine went idle with {len(active)} batches in flight")

    def run_real(self) -> None:
        engine = self.engine

        def loop(submitter: _Submitter) -> None:
            while not self._finished(submitter, engine.clock.now()):
                self._issue(submitter)
                status = engine.wait_batch(submitter.batch_id, WAIT_TIMEOUT_S)
                engine.free_batch(submitter.batch_id)
                if status.state is BatchState.IN_FLIGHT:
                    raise ScenarioError(f"batch {status.batch_id} did not finish in {WAIT_TIMEOUT_S} s")
                self._record(submitter, status.state, engine.clock.now())

        threads = [threading.Thread(target=loop, args=(_Submitter(i),), name=f"tebench-submitter-{i}")
                   for i in range(self.scenario.threads)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()

    def run(self) -> CellResult:
        try:
            if self.scenario.clock is ClockMode.VIRTUAL:
                self.run_virtual()
            else:
                self.run_real()
            snapshot = self.engine.telemetry_snapshot()
        finally:
            self.engine.shutdown()
        tiers = {
            rail.rail_id: int(self.graph.tier_of(rail.rail_id, self.device))
            for rail in self.graph.network_rails() if rail.node_id == self.src_node
        }
        duration = self.measure_end - self.measure_start if self.measure_start is not None else 0.0
        result = CellResult(
            policy=self.scenario.policy.value,
            penalty=self.penalty,
            block=self.block,
            batch=self.batch,
            threads=self.scenario.threads,
            latencies_s=self.latencies,
            bytes_moved=self.bytes_moved,
            duration_s=duration,
            failures=self.failures,
            snapshot=snapshot,
            tiers=tiers,
        )
        logger.info(f"{result.label}: {result.throughput_gbps:.2f} Gb/s, "
                    f"P99 {result.latency_us(99):.1f} us, {result.failures} failures")
        return result


def run_cell(scenario: BenchScenario, block: int, batch: int, penalty: Optional[float] = None) -> CellResult:
    return _Cell(scenario, block, batch, penalty).run()


def run_sweep(scenario: BenchScenario) -> SweepReport:
    """Every (block, batch) cell at the scenario's thread count."""
    report = SweepReport(scenario)
    for block in scenario.blocks:
        for batch in scenario.batches:
            report.cells.append(run_cell(scenario, block, batch))
    return report


def run_sensitivity(scenario: BenchScenario) -> SweepReport:
    """P99 against block size for each tier-2 penalty."""
    penalties = scenario.penalties or list(SENSITIVITY_PENALTIES)
    report = SweepReport(scenario)
    for penalty in penalties:
        for block in scenario.blocks:
            report.cells.append(run_cell(scenario, block, scenario.batches[0], penalty))
    for block in scenario.blocks:
        logger.info(f"Lowest P99 at {human_bytes(block)}: P={report.best_penalty(block):g}")
    return report


def run_failure_timeline(scenario: BenchScenario) -> TimelineReport:
    """
    Drive the first (block, batch) cell for ``duration_s`` under the fault schedule.

    Raises:
        ScenarioError: no fault schedule or no duration
    """
    if not scenario.faults:
        raise ScenarioError("a failure timeline needs a fault schedule")
    if scenario.duration_s is None:
        raise ScenarioError("a failure timeline runs for a fixed duration")
    cell = run_cell(scenario, scenario.blocks[0], scenario.batches[0])
    rows = timeline_rows(cell.snapshot, scenario.window_ms / 1000.0)
    if cell.failures:
        logger.error(f"{cell.failures} batches failed under the fault schedule")
    return TimelineReport(cell, rows, list(cell.snapshot.transitions))
