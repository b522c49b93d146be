"""
Predictive rail cost model.

A rail's expected completion time for ``L`` more bytes is

    t_hat = beta0 + beta1 * (A + L) / B

with ``A`` the bytes dispatched to the rail and not yet terminal and ``B`` its
declared bandwidth. The tier penalty scales that into a score; rails within
the tolerance band of the best score are treated as ties and round-robined.
"""
import threading
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from config import SchedulerConfig
from errors import NoEligibleDevice
from topology.enums import HealthState, Tier

FEEDBACK_EPSILON = 1e-3    # floor on a normalized observation, keeps beta1 > 0


@dataclass
class RailCostState:
    rail_id: str
    bandwidth: float
    tier: Tier
    beta0: float = 0.0
    beta1: float = 1.0
    queued_bytes: int = 0
    health: HealthState = HealthState.HEALTHY
    last_reset: float = 0.0
    latency_floor: Optional[float] = None


@dataclass(frozen=True)
class RailChoice:
    rail_id: str
    predicted: float
    score: float
    queued_at_dispatch: int


def predict_completion(state: RailCostState, length: int, queued: Optional[float] = None) -> float:
    """t_hat for ``length`` more bytes; ``queued`` overrides A (diffusion blend)."""
    backlog = state.queued_bytes if queued is None else queued
    return state.beta0 + state.beta1 * (backlog + length) / state.bandwidth


def effective_queue(state: RailCostState, config: SchedulerConfig,
                    global_load: Optional[Mapping[str, float]] = None) -> float:
    if not global_load or config.diffusion_weight <= 0:
        return float(state.queued_bytes)
    omega = config.diffusion_weight
    return (1.0 - omega) * state.queued_bytes + omega * global_load.get(state.rail_id, 0.0)


def eligible(candidates: Iterable[Tuple[str, Tier]], states: Mapping[str, RailCostState],
             config: SchedulerConfig) -> List[Tuple[str, Tier]]:
    """Healthy candidates whose tier carries a finite penalty."""
    return [
        (rail_id, tier) for rail_id, tier in candidates
        if config.penalties[int(tier)] is not None and states[rail_id].health is HealthState.HEALTHY
    ]


def choose_rail(length: int, candidates: Sequence[Tuple[str, Tier]], states: Mapping[str, RailCostState],
                config: SchedulerConfig, cursor: int,
                global_load: Optional[Mapping[str, float]] = None) -> Tuple[RailChoice, List[RailChoice]]:
    """
    Pick a rail for one slice. Pure: nothing is charged or advanced here.

    Args:
        length: slice length L in bytes
        candidates: (rail id, tier as seen from the slice's source) pairs
        states: cost state per rail
        config: scheduler settings (penalties, tolerance, diffusion weight)
        cursor: round-robin cursor into the tolerance set

    Returns:
        Tuple[RailChoice, List[RailChoice]]: the pick and the whole tolerance set

    Raises:
        NoEligibleDevice: no healthy, schedulable candidate
    """
    usable = eligible(candidates, states, config)
    if not usable:
        raise NoEligibleDevice(f"no eligible rail among {[c[0] for c in candidates]}")

    scored = []
    for rail_id, tier in usable:
        state = states[rail_id]
        queued = effective_queue(state, config, global_load)
        predicted = predict_completion(state, length, queued)
        scored.append(RailChoice(rail_id, predicted, config.penalties[int(tier)] * predicted, state.queued_bytes))

    best = min(choice.score for choice in scored)
    window = [choice for choice in scored if choice.score <= (1.0 + config.tolerance) * best]
    return window[cursor % len(window)], window


def feedback(state: RailCostState, t_obs: float, predicted: float, length: int,
             queued_at_dispatch: int, config: SchedulerConfig) -> RailCostState:
    """
    Fold one OK observation into the rail's coefficients and retire its bytes.

    beta1 follows the normalized observation (t_obs - beta0) / x with
    x = (A_at_dispatch + L) / B, capped at ``feedback_clamp`` times its current
    value. beta0 follows the lowest latency residue seen since the last reset.
    ``predicted`` is accepted for symmetry with the health check; an exact
    prediction leaves both coefficients where they are.
    """
    alpha = config.ewma_alpha
    state.queued_bytes = max(0, state.queued_bytes - length)

    x = (queued_at_dispatch + length) / state.bandwidth
    residue = max(0.0, t_obs - state.beta1 * x)
    state.latency_floor = residue if state.latency_floor is None else min(state.latency_floor, residue)

    observed = max(FEEDBACK_EPSILON, (t_obs - state.beta0) / x)
    observed = min(observed, config.feedback_clamp * state.beta1)
    state.beta1 = (1.0 - alpha) * state.beta1 + alpha * observed
    state.beta0 = max(0.0, (1.0 - alpha) * state.beta0 + alpha * state.latency_floor)
    return state


class CostModel:
    """
    Live cost state for every rail plus the global round-robin cursor.

    Queue accounting, the cursor, beta updates and resets all move under one
    lock, so a readmission reset never interleaves with a feedback step.
    """

    def __init__(self, rails: Iterable, config: SchedulerConfig, now: float = 0.0):
        self.config = config
        self.states: Dict[str, RailCostState] = {
            rail.rail_id: RailCostState(
                rail_id=rail.rail_id,
                bandwidth=rail.bandwidth,
                tier=rail.tier,
                beta0=config.beta0_init,
                beta1=config.beta1_init,
                last_reset=now,
            )
            for rail in rails
        }
        self.cursor = 0
        self._lock = threading.Lock()

    def choose(self, length: int, candidates: Sequence[Tuple[str, Tier]],
               global_load: Optional[Mapping[str, float]] = None) -> RailChoice:
        with self._lock:
            choice, _ = choose_rail(length, candidates, self.states, self.config, self.cursor, global_load)
            self.cursor += 1
            self.states[choice.rail_id].queued_bytes += length
        return choice

    def charge(self, rail_id: str, length: int) -> RailChoice:
        """Account a dispatch that bypassed ``choose`` (baselines, retries, probes)."""
        with self._lock:
            state = self.states[rail_id]
            choice = RailChoice(rail_id, predict_completion(state, length), 0.0, state.queued_bytes)
            state.queued_bytes += length
        return choice

    def release(self, rail_id: str, length: int) -> None:
        with self._lock:
            state = self.states[rail_id]
            state.queued_bytes = max(0, state.queued_bytes - length)

    def next_cursor(self) -> int:
        with self._lock:
            cursor = self.cursor
            self.cursor += 1
        return cursor

    def feedback(self, rail_id: str, t_obs: float, predicted: float, length: int, queued_at_dispatch: int) -> None:
        with self._lock:
            feedback(self.states[rail_id], t_obs, predicted, length, queued_at_dispatch, self.config)

    def _reset(self, state: RailCostState, now: float) -> None:
        state.beta0 = self.config.beta0_init
        state.beta1 = self.config.beta1_init
        state.latency_floor = None
        state.last_reset = now

    def reset_rail(self, rail_id: str, now: float) -> None:
        with self._lock:
            self._reset(self.states[rail_id], now)

    def periodic_reset(self, now: float) -> List[str]:
        """Restore learned coefficients on rails past the reset interval; queues are untouched."""
        reset = []
        with self._lock:
            for rail_id, state in self.states.items():
                if now - state.last_reset >= self.config.reset_interval_s:
                    self._reset(state, now)
                    reset.append(rail_id)
        return reset

    def total_queued(self) -> int:
        return sum(state.queued_bytes for state in self.states.values())

    def queue_snapshot(self) -> Dict[str, int]:
        return {rail_id: state.queued_bytes for rail_id, state in self.states.items()}
