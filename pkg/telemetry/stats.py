"""
Per-rail counters for the scheduler's feedback loop and the CLI reports.

Each worker writes only to its own shard; ``snapshot`` merges the shards
without stopping anyone. Service times go into fixed log-spaced buckets from
1 microsecond to 10 seconds.
"""
import math
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from topology.enums import CompletionStatus, HealthState

HISTOGRAM_EDGES_US = np.logspace(0, 7, 71)
BUCKETS = len(HISTOGRAM_EDGES_US) - 1


def bucket_of(t_us: float) -> int:
    index = int(np.searchsorted(HISTOGRAM_EDGES_US, t_us, side="right")) - 1
    return min(max(index, 0), BUCKETS - 1)


def histogram_percentile(counts: np.ndarray, q: float) -> float:
    """Approximate percentile in microseconds: geometric centre of the bucket holding rank q."""
    total = int(counts.sum())
    if total == 0:
        return 0.0
    rank = max(1, math.ceil(q / 100.0 * total))
    index = int(np.searchsorted(np.cumsum(counts), rank))
    return float(np.sqrt(HISTOGRAM_EDGES_US[index] * HISTOGRAM_EDGES_US[index + 1]))


@dataclass
class WindowCell:
    bytes_ok: int = 0
    bytes_failed: int = 0
    histogram: np.ndarray = field(default_factory=lambda: np.zeros(BUCKETS, dtype=np.int64))

    def merge(self, other: "WindowCell") -> None:
        self.bytes_ok += other.bytes_ok
        self.bytes_failed += other.bytes_failed
        self.histogram += other.histogram


@dataclass
class RailStats:
    rail_id: str
    bytes_posted: int = 0
    bytes_ok: int = 0
    bytes_failed: int = 0
    ok_count: int = 0
    queued_bytes: int = 0
    health: HealthState = HealthState.HEALTHY
    histogram: np.ndarray = field(default_factory=lambda: np.zeros(BUCKETS, dtype=np.int64))

    def percentile(self, q: float) -> float:
        return histogram_percentile(self.histogram, q)


@dataclass(frozen=True)
class TransitionRecord:
    at: float
    rail_id: str
    previous: HealthState
    current: HealthState
    reason: str


@dataclass
class TelemetrySnapshot:
    window_s: float
    rails: Dict[str, RailStats]
    windows: Dict[Tuple[int, str], WindowCell]
    queue_samples: Dict[Tuple[int, str], int]
    transitions: List[TransitionRecord]

    @property
    def total_ok(self) -> int:
        return sum(r.bytes_ok for r in self.rails.values())

    def byte_shares(self, rail_ids: Optional[Iterable[str]] = None) -> Dict[str, float]:
        ids = list(rail_ids) if rail_ids is not None else list(self.rails)
        total = sum(self.rails[r].bytes_ok for r in ids)
        return {r: (self.rails[r].bytes_ok / total if total else 0.0) for r in ids}


class _Shard:
    def __init__(self):
        self.posted: Dict[str, int] = defaultdict(int)
        self.ok: Dict[str, int] = defaultdict(int)
        self.failed: Dict[str, int] = defaultdict(int)
        self.ok_count: Dict[str, int] = defaultdict(int)
        self.histograms: Dict[str, np.ndarray] = {}
        self.windows: Dict[Tuple[int, str], WindowCell] = {}


class TelemetryCollector:
    def __init__(self, rail_ids: Iterable[str], window_s: float, enabled: bool = True, workers: int = 1):
        self.rail_ids = list(rail_ids)
        self.window_s = window_s
        self.enabled = enabled
        self._shards = [_Shard() for _ in range(max(1, workers))]
        self._queue_samples: Dict[Tuple[int, str], int] = {}
        self._last_sample_window: Optional[int] = None
        self._queued: Dict[str, int] = {}
        self._health: Dict[str, HealthState] = {r: HealthState.HEALTHY for r in self.rail_ids}
        self._transitions: List[TransitionRecord] = []
        self._lock = threading.Lock()

    def window_of(self, t: float) -> int:
        return math.floor(t / self.window_s + 1e-9)

    def record_post(self, worker_id: int, rail_id: str, length: int) -> None:
        if self.enabled:
            self._shards[worker_id].posted[rail_id] += length

    def record_completion(self, worker_id: int, rail_id: str, status: CompletionStatus, length: int,
                          t_obs: float, completed_at: float) -> None:
        if not self.enabled:
            return
        shard = self._shards[worker_id]
        key = (self.window_of(completed_at), rail_id)
        cell = shard.windows.get(key)
        if cell is None:
            cell = shard.windows[key] = WindowCell()
        if status is CompletionStatus.OK:
            bucket = bucket_of(t_obs * 1e6)
            shard.ok[rail_id] += length
            shard.ok_count[rail_id] += 1
            histogram = shard.histograms.get(rail_id)
            if histogram is None:
                histogram = shard.histograms[rail_id] = np.zeros(BUCKETS, dtype=np.int64)
            histogram[bucket] += 1
            cell.bytes_ok += length
            cell.histogram[bucket] += 1
        else:
            shard.failed[rail_id] += length
            cell.bytes_failed += length

    def sample_due(self, now: float) -> bool:
        return self.enabled and self.window_of(now) != self._last_sample_window

    def sample_queues(self, now: float, queued: Dict[str, int]) -> None:
        """Queue depth at most once per window; the first sample in a window wins."""
        with self._lock:
            self._queued = dict(queued)
            if not self.enabled:
                return
            window = self.window_of(now)
            if window == self._last_sample_window:
                return
            self._last_sample_window = window
            for rail_id, depth in queued.items():
                if depth:
                    self._queue_samples[(window, rail_id)] = depth

    def record_transition(self, at: float, rail_id: str, previous: HealthState, current: HealthState,
                          reason: str) -> None:
        with self._lock:
            self._health[rail_id] = current
            self._transitions.append(TransitionRecord(at, rail_id, previous, current, reason))

    def snapshot(self) -> TelemetrySnapshot:
        rails = {r: RailStats(r) for r in self.rail_ids}
        windows: Dict[Tuple[int, str], WindowCell] = {}
        for shard in self._shards:
            for rail_id, value in list(shard.posted.items()):
                rails[rail_id].bytes_posted += value
            for rail_id, value in list(shard.ok.items()):
                rails[rail_id].bytes_ok += value
            for rail_id, value in list(shard.failed.items()):
                rails[rail_id].bytes_failed += value
            for rail_id, value in list(shard.ok_count.items()):
                rails[rail_id].ok_count += value
            for rail_id, histogram in list(shard.histograms.items()):
                rails[rail_id].histogram += histogram
            for key, cell in list(shard.windows.items()):
                merged = windows.setdefault(key, WindowCell())
                merged.merge(cell)
        with self._lock:
            for rail_id, stats in rails.items():
                stats.queued_bytes = self._queued.get(rail_id, 0)
                stats.health = self._health.get(rail_id, HealthState.HEALTHY)
            samples = dict(self._queue_samples)
            transitions = list(self._transitions)
        return TelemetrySnapshot(self.window_s, rails, windows, samples, transitions)
