import threading
from typing import Dict, Mapping, Tuple


class GlobalLoadBoard:
    """
    Shared table of per-rail queued bytes, one row per publishing engine.

    Engines in one process share an instance. A publisher that has not
    refreshed within ``stale_periods`` publish periods is left out of the sum.
    """

    def __init__(self, publish_period_s: float, stale_periods: int = 3):
        self.publish_period_s = publish_period_s
        self.stale_periods = stale_periods
        self._rows: Dict[str, Tuple[float, Dict[str, int]]] = {}
        self._lock = threading.Lock()

    def publish(self, publisher_id: str, loads: Mapping[str, int], now: float) -> None:
        with self._lock:
            self._rows[publisher_id] = (now, dict(loads))

    def global_load(self, now: float) -> Dict[str, float]:
        horizon = self.stale_periods * self.publish_period_s
        totals: Dict[str, float] = {}
        with self._lock:
            for published_at, loads in self._rows.values():
                if now - published_at > horizon:
                    continue
                for rail_id, queued in loads.items():
                    totals[rail_id] = totals.get(rail_id, 0.0) + queued
        return totals

    def publishers(self, now: float) -> int:
        horizon = self.stale_periods * self.publish_period_s
        with self._lock:
            return sum(1 for published_at, _ in self._rows.values() if now - published_at <= horizon)
