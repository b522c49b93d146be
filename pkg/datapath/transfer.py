"""
In-engine records for a submitted transfer.

A transfer is cut into work units; the batch counts units as its slices.
On a direct route a unit is one slice; on a staged route it is one pipeline
chunk. Each unit is executed by one or more fragments, the things actually
posted to a backend. Fragments carry the unit generation they were created
under, so work from an abandoned route is recognized and dropped.
"""
import threading
from dataclasses import dataclass, field
from typing import List, Optional, Set, Tuple

from topology.enums import Direction, Tier
from topology.reachability import ReachabilityEntry
from transports.base import SliceWorkRequest


class WorkUnit:
    def __init__(self, transfer: "Transfer", index: int, offset: int, length: int):
        self.transfer = transfer
        self.index = index
        self.offset = offset
        self.length = length
        self.generation = 0
        self.route_index = 0
        self.pending = 0
        self.done = False

    def fragment_done(self, fragment: "Fragment") -> bool:
        """Direct execution: the unit is done once every fragment is."""
        with self.transfer.lock:
            if self.done or fragment.generation != self.generation:
                return False
            self.pending -= 1
            if self.pending == 0:
                self.done = True
                return True
            return False

    def fragment_retired(self, fragment: "Fragment") -> None:
        pass

    def __repr__(self) -> str:
        return f"WorkUnit(transfer={self.transfer.transfer_id}, index={self.index}, gen={self.generation})"


class Transfer:
    def __init__(self, transfer_id: int, batch, src, src_offset: int, dst, dst_offset: int,
                 length: int, direction: Direction, plan):
        self.transfer_id = transfer_id
        self.batch = batch
        self.src = src
        self.src_offset = src_offset
        self.dst = dst
        self.dst_offset = dst_offset
        self.length = length
        self.direction = direction
        self.plan = plan
        self.units: List[WorkUnit] = []
        self.jobs: List = []            # staged jobs, newest last
        self.remaining = 0
        self.closed = False
        self.lock = threading.RLock()

    def cut(self, pieces: List[Tuple[int, int]]) -> List[WorkUnit]:
        self.units = [WorkUnit(self, i, offset, length) for i, (offset, length) in enumerate(pieces)]
        self.remaining = len(self.units)
        return self.units

    def unit_finished(self) -> bool:
        """Count one finished unit; True when it was the last."""
        with self.lock:
            self.remaining -= 1
            if self.remaining == 0:
                self.closed = True
                return True
            return False

    def incomplete_units(self) -> List[WorkUnit]:
        with self.lock:
            return [unit for unit in self.units if not unit.done]


@dataclass(eq=False)
class Fragment:
    """One postable piece of work and its attempt history."""

    fragment_id: int
    owner: object
    unit: Optional[WorkUnit]
    generation: int
    backend_id: str
    entries: Tuple[ReachabilityEntry, ...]
    src_segment: str
    src_offset: int
    dst_segment: str
    dst_offset: int
    length: int
    direction: Direction
    slice_offset: int = 0
    attempt: int = 0             # bumps on every post; completions match on it
    spent: int = 0               # attempts counted against the retry budget
    blacklist: Set[Tuple[str, str]] = field(default_factory=set)
    local_rail: str = ""
    remote_rail: str = ""
    predicted: float = 0.0
    queued_at_dispatch: int = 0
    selected_at: float = 0.0     # rail picked; the prediction starts here
    dispatched_at: float = 0.0   # posted to the backend
    is_probe: bool = False

    @property
    def stale(self) -> bool:
        if self.unit is None:
            return False
        return self.unit.transfer.closed or self.generation != self.unit.generation

    @property
    def batch_id(self) -> int:
        return self.unit.transfer.batch.batch_id if self.unit is not None else 0

    def candidates(self) -> List[Tuple[str, Tier]]:
        """Distinct local rails with the tier the scheduler penalizes."""
        seen = {}
        for entry in self.entries:
            seen.setdefault(entry.local_rail, entry.local_tier)
        return list(seen.items())

    def to_request(self) -> SliceWorkRequest:
        return SliceWorkRequest(
            slice_id=self.fragment_id,
            batch_id=self.batch_id,
            src_segment=self.src_segment,
            src_offset=self.src_offset,
            dst_segment=self.dst_segment,
            dst_offset=self.dst_offset,
            length=self.length,
            direction=self.direction,
            local_rail=self.local_rail,
            remote_rail=self.remote_rail,
            attempt=self.attempt,
        )
