from abc import ABC, abstractmethod
from typing import Mapping, Optional, Sequence, Tuple

from config import SchedulerConfig
from errors import NoEligibleDevice
from scheduler.cost_model import CostModel, RailChoice, eligible
from topology.enums import Policy, Tier


class RailPolicy(ABC):
    """Chooses the local rail for one slice and charges its bytes to that rail."""

    def __init__(self, cost: CostModel, config: SchedulerConfig):
        self.cost = cost
        self.config = config

    @abstractmethod
    def select(self, length: int, offset: int, candidates: Sequence[Tuple[str, Tier]],
               global_load: Optional[Mapping[str, float]] = None) -> RailChoice:
        pass

    def _usable(self, candidates: Sequence[Tuple[str, Tier]]):
        usable = eligible(candidates, self.cost.states, self.config)
        if not usable:
            raise NoEligibleDevice(f"no eligible rail among {[c[0] for c in candidates]}")
        return usable


class TelemetryPolicy(RailPolicy):
    """Predicted completion time times tier penalty, ties round-robined."""

    def select(self, length, offset, candidates, global_load=None) -> RailChoice:
        return self.cost.choose(length, candidates, global_load)


class RoundRobinPolicy(RailPolicy):
    """Fixed striping over every schedulable rail, blind to load."""

    def select(self, length, offset, candidates, global_load=None) -> RailChoice:
        usable = self._usable(candidates)
        rail_id, _ = usable[self.cost.next_cursor() % len(usable)]
        return self.cost.charge(rail_id, length)


class HashPolicy(RailPolicy):
    """Slice offset (in minimum-slice units) modulo the rail count."""

    def select(self, length, offset, candidates, global_load=None) -> RailChoice:
        usable = self._usable(candidates)
        rail_id, _ = usable[(offset // self.config.min_slice_size) % len(usable)]
        return self.cost.charge(rail_id, length)


POLICIES = {
    Policy.TELEMETRY: TelemetryPolicy,
    Policy.ROUND_ROBIN: RoundRobinPolicy,
    Policy.HASH: HashPolicy,
}


def make_policy(cost: CostModel, config: SchedulerConfig) -> RailPolicy:
    return POLICIES[config.policy](cost, config)
