import itertools
import threading
from dataclasses import dataclass
from typing import Dict, Optional

from errors import BatchClosed, UnknownBatch
from topology.enums import BatchState


@dataclass(frozen=True)
class BatchStatus:
    batch_id: int
    state: BatchState
    remaining: int
    total: int
    reason: Optional[str] = None


class BatchControlBlock:
    """
    Completion counters for one batch: the only state an application sees.

    ``remaining`` drops exactly once per finished slice; retries never touch
    it. A batch with no slices reads as complete but still takes submissions;
    once it has had slices and drained, or failed, it is closed.
    """

    def __init__(self, batch_id: int, capacity_hint: int = 0):
        self.batch_id = batch_id
        self.capacity_hint = capacity_hint
        self.total = 0
        self.remaining = 0
        self.per_transfer: Dict[int, int] = {}
        self.failed = False
        self.reason: Optional[str] = None
        self.done = threading.Event()
        self.done.set()
        self._lock = threading.Lock()

    @property
    def closed(self) -> bool:
        return self.failed or (self.total > 0 and self.remaining == 0)

    def add_transfer(self, transfer_id: int, slices: int) -> None:
        with self._lock:
            if self.closed:
                raise BatchClosed(f"batch {self.batch_id} is already {self.state.value}")
            self.per_transfer[transfer_id] = slices
            self.total += slices
            self.remaining += slices
            self.done.clear()

    def slice_done(self, transfer_id: int) -> bool:
        """Count one finished slice; True when this completed the batch."""
        with self._lock:
            if self.failed or self.per_transfer.get(transfer_id, 0) <= 0:
                return False
            self.per_transfer[transfer_id] -= 1
            self.remaining -= 1
            if self.remaining == 0:
                self.done.set()
                return True
            return False

    def fail(self, reason: str) -> bool:
        """Latch the failure; only the first reason is kept."""
        with self._lock:
            if self.failed or (self.total > 0 and self.remaining == 0):
                return False
            self.failed = True
            self.reason = reason
            self.done.set()
            return True

    @property
    def state(self) -> BatchState:
        if self.failed:
            return BatchState.FAILED
        if self.remaining == 0:
            return BatchState.COMPLETE
        return BatchState.IN_FLIGHT

    def status(self) -> BatchStatus:
        return BatchStatus(self.batch_id, self.state, self.remaining, self.total, self.reason)


class BatchRegistry:
    def __init__(self):
        self._ids = itertools.count(1)
        self._batches: Dict[int, BatchControlBlock] = {}
        self._lock = threading.Lock()

    def allocate(self, capacity_hint: int = 0) -> BatchControlBlock:
        with self._lock:
            batch = BatchControlBlock(next(self._ids), capacity_hint)
            self._batches[batch.batch_id] = batch
        return batch

    def get(self, batch_id: int) -> BatchControlBlock:
        batch = self._batches.get(batch_id)
        if batch is None:
            raise UnknownBatch(f"unknown batch: {batch_id}")
        return batch

    def free(self, batch_id: int) -> BatchControlBlock:
        with self._lock:
            batch = self._batches.pop(batch_id, None)
        if batch is None:
            raise UnknownBatch(f"unknown batch: {batch_id}")
        return batch

    def live(self):
        return list(self._batches.values())
