import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional

from config import ResilienceConfig
from scheduler.cost_model import CostModel
from topology.enums import CompletionStatus, HealthState
from transports.base import CompletionEvent
from utils import setup_logger

logger = setup_logger(__name__)


@dataclass
class RailHealth:
    rail_id: str
    state: HealthState = HealthState.HEALTHY
    consecutive_failures: int = 0
    degraded_events: int = 0
    last_ratio: float = 0.0
    excluded_at: Optional[float] = None
    probe_backoff: int = 0
    probe_successes: int = 0
    next_probe_at: Optional[float] = None
    probe_outstanding: bool = False


@dataclass(frozen=True)
class HealthTransition:
    at: float
    rail_id: str
    previous: HealthState
    current: HealthState
    reason: str


class HealthMonitor:
    """
    Link-level health: soft exclusion on explicit failures or sustained slowdown.

    Allowed moves are healthy -> excluded, excluded -> probing,
    probing -> healthy and probing -> excluded. The scheduler sees the state
    through ``RailCostState.health``, which is written here and nowhere else.
    """

    def __init__(self, rail_ids: Iterable[str], config: ResilienceConfig, cost: CostModel, clock,
                 on_transition: Optional[Callable[[HealthTransition], None]] = None):
        self.config = config
        self.cost = cost
        self.clock = clock
        self.on_transition = on_transition
        self.rails: Dict[str, RailHealth] = {rail_id: RailHealth(rail_id) for rail_id in rail_ids}
        self.transitions: List[HealthTransition] = []
        self.version = 0          # bumps whenever a rail is readmitted
        self._lock = threading.RLock()

    def is_healthy(self, rail_id: str) -> bool:
        return self.rails[rail_id].state is HealthState.HEALTHY

    def state_of(self, rail_id: str) -> HealthState:
        return self.rails[rail_id].state

    def _move(self, health: RailHealth, current: HealthState, reason: str) -> HealthTransition:
        transition = HealthTransition(self.clock.now(), health.rail_id, health.state, current, reason)
        health.state = current
        self.cost.states[health.rail_id].health = current
        self.transitions.append(transition)
        if current is HealthState.HEALTHY:
            self.version += 1
        level = logger.info if current is HealthState.PROBING else logger.warning
        level(f"Rail {health.rail_id}: {transition.previous.value} -> {current.value} ({reason})")
        if self.on_transition is not None:
            self.on_transition(transition)
        return transition

    def _exclude(self, health: RailHealth, reason: str) -> HealthTransition:
        now = self.clock.now()
        health.excluded_at = now
        health.consecutive_failures = 0
        health.degraded_events = 0
        health.probe_successes = 0
        health.next_probe_at = now + self.probe_delay(health)
        return self._move(health, HealthState.EXCLUDED, reason)

    def probe_delay(self, health: RailHealth) -> float:
        return self.config.probe_period_s * (self.config.probe_backoff_factor ** health.probe_backoff)

    def observe(self, event: CompletionEvent, predicted: float) -> Optional[HealthTransition]:
        """
        Fold one terminal slice event into the rail's counters.

        Returns:
            Optional[HealthTransition]: the exclusion, when this event caused one
        """
        with self._lock:
            health = self.rails[event.rail_id]
            if health.state is not HealthState.HEALTHY:
                return None
            if event.status is not CompletionStatus.OK:
                health.consecutive_failures += 1
                if health.consecutive_failures >= self.config.failure_threshold:
                    return self._exclude(health, f"{health.consecutive_failures} consecutive {event.status.value}")
                return None

            health.consecutive_failures = 0
            if predicted <= 0:
                return None
            health.last_ratio = event.t_obs / predicted
            if health.last_ratio > self.config.degradation_ratio:
                health.degraded_events += 1
                if health.degraded_events >= self.config.degradation_window:
                    return self._exclude(
                        health, f"observed/predicted above {self.config.degradation_ratio} "
                                f"for {health.degraded_events} events"
                    )
            else:
                health.degraded_events = 0
            return None

    def exclude(self, rail_id: str, reason: str) -> Optional[HealthTransition]:
        with self._lock:
            health = self.rails[rail_id]
            if health.state is not HealthState.HEALTHY:
                return None
            return self._exclude(health, reason)

    @staticmethod
    def _awaiting_probe(health: RailHealth) -> bool:
        return (health.state is not HealthState.HEALTHY and not health.probe_outstanding
                and health.next_probe_at is not None)

    def probes_due(self, now: float) -> List[str]:
        with self._lock:
            return [h.rail_id for h in self.rails.values() if self._awaiting_probe(h) and h.next_probe_at <= now]

    def next_probe_time(self) -> Optional[float]:
        with self._lock:
            times = [h.next_probe_at for h in self.rails.values() if self._awaiting_probe(h)]
        return min(times) if times else None

    def begin_probe(self, rail_id: str) -> None:
        with self._lock:
            health = self.rails[rail_id]
            health.probe_outstanding = True
            if health.state is HealthState.EXCLUDED:
                self._move(health, HealthState.PROBING, "heartbeat sent")

    def probe_result(self, rail_id: str, ok: bool) -> Optional[HealthTransition]:
        """A probe succeeded or failed; readmit after enough successes in a row."""
        with self._lock:
            health = self.rails[rail_id]
            if health.state is not HealthState.PROBING:
                return None
            health.probe_outstanding = False
            if not ok:
                health.probe_backoff = min(health.probe_backoff + 1, self.config.probe_backoff_cap)
                health.probe_successes = 0
                health.next_probe_at = self.clock.now() + self.probe_delay(health)
                return self._move(health, HealthState.EXCLUDED, "heartbeat failed")
            health.probe_successes += 1
            if health.probe_successes < self.config.probe_successes:
                # next heartbeat goes out right away
                health.next_probe_at = self.clock.now()
                return None
            health.probe_successes = 0
            health.consecutive_failures = 0
            health.degraded_events = 0
            health.next_probe_at = None
            self.cost.reset_rail(rail_id, self.clock.now())
            return self._move(health, HealthState.HEALTHY, "heartbeats succeeded")

    def postpone_probe(self, rail_id: str) -> None:
        with self._lock:
            health = self.rails[rail_id]
            health.next_probe_at = self.clock.now() + self.probe_delay(health)

    def clear_backoff(self, rail_ids: Iterable[str]) -> None:
        with self._lock:
            for rail_id in rail_ids:
                self.rails[rail_id].probe_backoff = 0

    def snapshot(self) -> Dict[str, HealthState]:
        return {rail_id: h.state for rail_id, h in self.rails.items()}
