"""Engine clocks: a deterministic virtual clock and the wall clock."""
import threading
import time

from errors import ClockRegression


class RealClock:
    virtual = False

    def now(self) -> float:
        return time.monotonic()


class VirtualClock:
    """
    Monotone simulated time in seconds.

    Only the driver advances it (engine stepping or ``simulate_advance`` on the
    simulated backend); readers never block.
    """

    virtual = True

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        return self._now

    def advance_to(self, t: float) -> None:
        with self._lock:
            if t < self._now:
                raise ClockRegression(f"clock cannot move back from {self._now} to {t}")
            self._now = float(t)

    def advance(self, dt: float) -> None:
        self.advance_to(self._now + dt)
