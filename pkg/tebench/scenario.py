import json
from pathlib import Path
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import (BackendSpec, DatapathConfig, EngineConfig, MiB, ResilienceConfig, SchedulerConfig,
                    StagingConfig, TelemetryConfig, TIER_PENALTIES)
from errors import ScenarioError
from topology.enums import ClockMode, Policy

PACKAGE_DIR = Path(__file__).resolve().parent
FABRICS_DIR = PACKAGE_DIR / "fabrics"
FAULTS_DIR = PACKAGE_DIR / "faults"


def resolve_document(name_or_path: str, directory: Path) -> Path:
    """A canonical name (``skewed8``) or a path to a JSON document."""
    path = Path(name_or_path)
    if path.exists():
        return path
    canonical = directory / f"{name_or_path}.json"
    if canonical.exists():
        return canonical
    raise ScenarioError(f"no such document: {name_or_path}")


class BenchScenario(BaseModel):
    """One benchmark run: what to move, how often, over which fabric and policy."""
    model_config = ConfigDict(extra="forbid")

    fabric: str = "uniform8"
    backends: List[str] = Field(default_factory=lambda: ["simulated", "memory"])
    policy: Policy = Policy.TELEMETRY
    blocks: List[int] = Field(default_factory=lambda: [4 * MiB], min_length=1)
    batches: List[int] = Field(default_factory=lambda: [1], min_length=1)
    threads: int = Field(1, ge=1)
    iters: Optional[int] = Field(20, ge=1)
    duration_s: Optional[float] = Field(None, gt=0)
    warmup: int = Field(2, ge=0)
    seed: int = Field(0, ge=0)
    faults: Optional[str] = None
    clock: ClockMode = ClockMode.VIRTUAL
    penalties: List[float] = Field(default_factory=list)     # tier-2 penalty sweep
    probe_period_s: Optional[float] = Field(None, gt=0)
    window_ms: float = Field(10.0, gt=0)

    @field_validator("blocks", "batches")
    @classmethod
    def _positive(cls, values: List[int]) -> List[int]:
        if any(v < 1 for v in values):
            raise ValueError("block and batch sizes must be >= 1")
        return values

    @model_validator(mode="after")
    def _clock_matches_backends(self) -> "BenchScenario":
        simulated = "simulated" in self.backends
        if self.clock is ClockMode.VIRTUAL and not simulated:
            raise ValueError("the virtual clock needs the simulated backend")
        if self.clock is ClockMode.REAL and simulated:
            raise ValueError("the real clock runs tcp/memory/file backends only")
        if self.iters is None and self.duration_s is None:
            raise ValueError("set iters or duration_s")
        return self

    @classmethod
    def from_json(cls, text: str) -> "BenchScenario":
        try:
            return cls.model_validate(json.loads(text))
        except (json.JSONDecodeError, ValidationError) as e:
            raise ScenarioError(f"invalid scenario: {e}") from e

    @property
    def fabric_path(self) -> Path:
        return resolve_document(self.fabric, FABRICS_DIR)

    @property
    def faults_path(self) -> Optional[Path]:
        return resolve_document(self.faults, FAULTS_DIR) if self.faults else None

    def engine_config(self, penalty: Optional[float] = None) -> EngineConfig:
        """Engine settings for one cell; ``penalty`` overrides the tier-2 penalty."""
        penalties = dict(TIER_PENALTIES)
        if penalty is not None:
            penalties[2] = penalty
        resilience = ResilienceConfig()
        if self.probe_period_s is not None:
            resilience = ResilienceConfig(probe_period_s=self.probe_period_s)
        virtual = self.clock is ClockMode.VIRTUAL
        return EngineConfig(
            clock=self.clock,
            backends=[BackendSpec(kind=kind, seed=self.seed) for kind in self.backends],
            scheduler=SchedulerConfig(policy=self.policy, penalties=penalties),
            resilience=resilience,
            datapath=DatapathConfig(),
            staging=StagingConfig(materialize=not virtual),
            telemetry=TelemetryConfig(window_s=self.window_ms / 1000.0),
        )
