import threading
import time
from collections import deque
from typing import Callable, Deque, Generic, List, Optional, TypeVar

T = TypeVar("T")


class SubmissionRing(Generic[T]):
    """
    Bounded many-producer, one-consumer queue feeding one worker.

    Producers append under a short lock; the owning worker pops without one.
    A full ring makes ``push`` spin for ``spin_budget`` rounds and then yield
    the CPU; ``on_full`` runs once per round so a single-threaded (virtual
    clock) driver can make room itself.
    """

    def __init__(self, capacity: int, spin_budget: int = 64, yield_s: float = 0.0005,
                 on_full: Optional[Callable[[], None]] = None):
        self.capacity = capacity
        self.spin_budget = spin_budget
        self.yield_s = yield_s
        self.on_full = on_full
        self._items: Deque[T] = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def try_push(self, item: T) -> bool:
        with self._lock:
            if len(self._items) >= self.capacity:
                return False
            self._items.append(item)
            return True

    def push(self, item: T) -> None:
        spins = 0
        while not self.try_push(item):
            if self.on_full is not None:
                self.on_full()
                continue
            spins += 1
            if spins > self.spin_budget:
                time.sleep(self.yield_s)

    def pop_many(self, limit: int) -> List[T]:
        items = []
        while len(items) < limit:
            try:
                items.append(self._items.popleft())
            except IndexError:
                break
        return items
