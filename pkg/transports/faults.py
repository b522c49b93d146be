import json
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from errors import DanglingReference, ScenarioError
from topology.graph import JitterSpec, TopologyGraph

FaultEffect = Literal["down", "degrade", "jitter", "drop_completion"]


class FaultEntry(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    rail: str
    effect: FaultEffect
    start_ms: float = Field(ge=0)
    end_ms: float
    factor: Optional[float] = Field(None, gt=0, le=1)   # degrade only
    distribution: Optional[JitterSpec] = None            # jitter only

    @model_validator(mode="after")
    def _check_effect(self) -> "FaultEntry":
        if self.end_ms <= self.start_ms:
            raise ValueError(f"fault on {self.rail} must end after it starts")
        if self.effect == "degrade" and self.factor is None:
            raise ValueError("degrade needs a factor in (0, 1]")
        if self.effect == "jitter" and self.distribution is None:
            raise ValueError("jitter needs a distribution")
        return self

    @property
    def start_s(self) -> float:
        return self.start_ms / 1000.0

    @property
    def end_s(self) -> float:
        return self.end_ms / 1000.0

    def active_at(self, t: float) -> bool:
        return self.start_s <= t < self.end_s


class FaultSchedule(BaseModel):
    """
    Timed faults applied by the simulated backend.

    Intervals may overlap across rails or effects, never for the same
    (rail, effect).
    """
    model_config = ConfigDict(extra="forbid")

    faults: List[FaultEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def _no_same_effect_overlap(self) -> "FaultSchedule":
        by_key: Dict[Tuple[str, str], List[FaultEntry]] = defaultdict(list)
        for fault in self.faults:
            by_key[(fault.rail, fault.effect)].append(fault)
        for key, entries in by_key.items():
            entries.sort(key=lambda f: f.start_ms)
            for prev, cur in zip(entries, entries[1:]):
                if cur.start_ms < prev.end_ms:
                    raise ValueError(f"overlapping {key[1]} faults on rail {key[0]}")
        return self

    @classmethod
    def from_json(cls, text: str) -> "FaultSchedule":
        try:
            return cls.model_validate(json.loads(text))
        except (json.JSONDecodeError, ValidationError) as e:
            raise ScenarioError(f"invalid fault schedule: {e}") from e

    @classmethod
    def load(cls, path: str) -> "FaultSchedule":
        return cls.from_json(Path(path).read_text())

    def check_rails(self, graph: TopologyGraph) -> None:
        for fault in self.faults:
            if fault.rail not in graph.rails:
                raise DanglingReference(f"fault refers to unknown rail {fault.rail}")

    def active(self, rail_id: str, effect: str, t: float) -> Optional[FaultEntry]:
        for fault in self.faults:
            if fault.rail == rail_id and fault.effect == effect and fault.active_at(t):
                return fault
        return None

    def first_down(self, rail_id: str, t0: float, t1: float) -> Optional[FaultEntry]:
        """Earliest ``down`` interval on the rail that overlaps [t0, t1)."""
        hits = [
            f for f in self.faults
            if f.rail == rail_id and f.effect == "down" and f.start_s < t1 and f.end_s > t0
        ]
        return min(hits, key=lambda f: f.start_ms) if hits else None

    def down_windows(self) -> List[FaultEntry]:
        return sorted((f for f in self.faults if f.effect == "down"), key=lambda f: (f.start_ms, f.rail))


def sample_jitter(spec: JitterSpec, rng: np.random.Generator) -> float:
    """One non-negative jitter sample in seconds."""
    scale = spec.scale_us * 1e-6
    if spec.distribution == "exponential":
        value = rng.exponential(scale)
    elif spec.distribution == "uniform":
        value = rng.uniform(0.0, scale)
    elif spec.distribution == "normal":
        value = abs(rng.normal(0.0, scale))
    else:
        value = scale * rng.pareto(spec.shape)
    return float(value)
