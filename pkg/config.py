import json
import os
from pathlib import Path
from typing import Dict, List, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from topology.enums import ClockMode, Medium, Policy

load_dotenv()

# 🧪 TESTING CONFIGURATION
# TESTING_MODE shortens the prober cadence so failure timelines fit in a test run
TESTING_MODE = os.getenv("RAILSPRAY_TESTING_MODE", "true").lower() in ("1", "true", "yes")

TESTING_PROBE_PERIOD_S = 1.0       # per the 1 s link-status reset of the failure timeline
PRODUCTION_PROBE_PERIOD_S = 30.0

ACTIVE_PROBE_PERIOD_S = TESTING_PROBE_PERIOD_S if TESTING_MODE else PRODUCTION_PROBE_PERIOD_S

KiB = 1 << 10
MiB = 1 << 20
GiB = 1 << 30

# Slice scheduler
MIN_SLICE_SIZE = 64 * KiB
MAX_SLICES_PER_TRANSFER = 4096
TOLERANCE = 0.05
TIER_PENALTIES = {1: 1.0, 2: 3.0, 3: None}   # None: unschedulable
EWMA_ALPHA = 0.2
RESET_INTERVAL_S = 30.0
DIFFUSION_WEIGHT = 0.0
BETA0_INIT = 0.0
BETA1_INIT = 1.0
FEEDBACK_CLAMP = 5.0              # cap on a single observation, as a multiple of beta1
LOAD_PUBLISH_PERIOD_S = 0.010

# Resilience
FAILURE_THRESHOLD = 3
DEGRADATION_RATIO = 4.0
DEGRADATION_WINDOW = 8
PROBE_SUCCESSES = 2
PROBE_SIZE = 4 * KiB
PROBE_BACKOFF_FACTOR = 1.0
PROBE_BACKOFF_CAP = 5
MAX_ATTEMPTS = 4
RETRY_BACKOFF_S = 0.001

# Datapath
RING_CAPACITY = 8192
BURST = 32
TIMEOUT_REAL_S = 2.0
TIMEOUT_VIRTUAL_S = 0.5
WHEEL_BUCKET_S = 0.010
SPIN_BUDGET = 64
IDLE_SLEEP_S = 0.0005

# Staged routes
STAGING_CHUNK_SIZE = 4 * MiB
STAGING_RING_DEPTH = 4
STAGING_POOL_BYTES = 64 * MiB

# Simulated fabric
SIM_INFLIGHT_WINDOW = 64
SIM_LATENCY_US = 10.0

# Telemetry
TELEMETRY_WINDOW_S = 0.010


class SchedulerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    policy: Policy = Policy.TELEMETRY
    min_slice_size: int = MIN_SLICE_SIZE
    max_slices: int = MAX_SLICES_PER_TRANSFER
    tolerance: float = TOLERANCE
    penalties: Dict[int, Optional[float]] = Field(default_factory=lambda: dict(TIER_PENALTIES))
    ewma_alpha: float = EWMA_ALPHA
    reset_interval_s: float = RESET_INTERVAL_S
    diffusion_weight: float = DIFFUSION_WEIGHT
    beta0_init: float = BETA0_INIT
    beta1_init: float = BETA1_INIT
    feedback_clamp: float = Field(FEEDBACK_CLAMP, gt=1)
    publish_period_s: float = Field(LOAD_PUBLISH_PERIOD_S, gt=0)

    @field_validator("tolerance")
    @classmethod
    def _positive_tolerance(cls, value: float) -> float:
        if value <= 0:
            raise ValueError("tolerance must be > 0")
        return value

    @field_validator("ewma_alpha")
    @classmethod
    def _alpha_range(cls, value: float) -> float:
        if not 0 < value <= 1:
            raise ValueError("ewma_alpha must be in (0, 1]")
        return value

    @field_validator("min_slice_size")
    @classmethod
    def _min_slice(cls, value: int) -> int:
        if value < 4096:
            raise ValueError("min_slice_size must be >= 4096")
        return value

    @field_validator("diffusion_weight")
    @classmethod
    def _weight_range(cls, value: float) -> float:
        if not 0 <= value <= 1:
            raise ValueError("diffusion_weight must be in [0, 1]")
        return value

    @model_validator(mode="after")
    def _check_penalties(self) -> "SchedulerConfig":
        if set(self.penalties) != {1, 2, 3}:
            raise ValueError("penalties must define tiers 1, 2 and 3")
        if self.beta1_init <= 0 or self.beta0_init < 0:
            raise ValueError("beta1_init must be > 0 and beta0_init >= 0")
        previous = 0.0
        for tier in (1, 2, 3):
            value = self.penalties[tier]
            rank = float("inf") if value is None else value
            if value is not None and value <= 0:
                raise ValueError(f"penalty for tier {tier} must be > 0")
            if rank < previous:
                raise ValueError("penalties must be non-decreasing in tier")
            previous = rank
        return self


class ResilienceConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    failure_threshold: int = Field(FAILURE_THRESHOLD, ge=1)
    degradation_ratio: float = Field(DEGRADATION_RATIO, gt=1)
    degradation_window: int = Field(DEGRADATION_WINDOW, ge=1)
    probe_successes: int = Field(PROBE_SUCCESSES, ge=1)
    probe_size: int = Field(PROBE_SIZE, ge=1)
    probe_period_s: float = Field(ACTIVE_PROBE_PERIOD_S, gt=0)
    probe_backoff_factor: float = Field(PROBE_BACKOFF_FACTOR, ge=1)
    probe_backoff_cap: int = Field(PROBE_BACKOFF_CAP, ge=0)
    max_attempts: int = Field(MAX_ATTEMPTS, ge=1)
    retry_backoff_s: float = Field(RETRY_BACKOFF_S, ge=0)


class DatapathConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    workers: Optional[int] = Field(None, ge=1)   # None: one worker per rail
    ring_capacity: int = Field(RING_CAPACITY, ge=1)
    burst: int = Field(BURST, ge=1)
    timeout_real_s: float = Field(TIMEOUT_REAL_S, gt=0)
    timeout_virtual_s: float = Field(TIMEOUT_VIRTUAL_S, gt=0)
    wheel_bucket_s: float = Field(WHEEL_BUCKET_S, gt=0)
    spin_budget: int = Field(SPIN_BUDGET, ge=0)
    idle_sleep_s: float = Field(IDLE_SLEEP_S, ge=0)


class StagingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    chunk_size: int = Field(STAGING_CHUNK_SIZE, ge=1)
    ring_depth: int = Field(STAGING_RING_DEPTH, ge=1)
    pool_bytes: int = Field(STAGING_POOL_BYTES, ge=1)
    materialize: bool = True       # False: timing-only staging for benchmark runs

    @model_validator(mode="after")
    def _ring_fits_pool(self) -> "StagingConfig":
        if self.chunk_size * self.ring_depth > self.pool_bytes:
            raise ValueError("staging pool must hold at least one ring")
        return self


class TelemetryConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    window_s: float = Field(TELEMETRY_WINDOW_S, gt=0)


class BackendSpec(BaseModel):
    """One transport backend to load at engine start."""
    model_config = ConfigDict(extra="forbid")

    kind: str
    backend_id: Optional[str] = None
    enabled: bool = True
    media: Optional[List[Medium]] = None          # overrides the backend's default media set
    inflight_window: int = Field(SIM_INFLIGHT_WINDOW, ge=1)
    latency_us: float = Field(SIM_LATENCY_US, ge=0)
    seed: int = 0
    host: str = "127.0.0.1"
    root_dir: Optional[str] = None

    @field_validator("kind")
    @classmethod
    def _known_kind(cls, value: str) -> str:
        if value not in ("simulated", "tcp", "memory", "file"):
            raise ValueError(f"unknown backend kind: {value}")
        return value

    @property
    def resolved_id(self) -> str:
        return self.backend_id or self.kind


class EngineConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    topology_path: Optional[str] = None
    clock: ClockMode = ClockMode.VIRTUAL
    backends: List[BackendSpec] = Field(
        default_factory=lambda: [BackendSpec(kind="memory"), BackendSpec(kind="simulated")]
    )
    scheduler: SchedulerConfig = Field(default_factory=SchedulerConfig)
    resilience: ResilienceConfig = Field(default_factory=ResilienceConfig)
    datapath: DatapathConfig = Field(default_factory=DatapathConfig)
    staging: StagingConfig = Field(default_factory=StagingConfig)
    telemetry: TelemetryConfig = Field(default_factory=TelemetryConfig)

    @model_validator(mode="after")
    def _unique_backend_ids(self) -> "EngineConfig":
        ids = [spec.resolved_id for spec in self.backends]
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate backend ids: {ids}")
        return self

    @property
    def timeout_s(self) -> float:
        if self.clock is ClockMode.VIRTUAL:
            return self.datapath.timeout_virtual_s
        return self.datapath.timeout_real_s

    @classmethod
    def from_json(cls, text: str) -> "EngineConfig":
        return cls.model_validate(json.loads(text))

    @classmethod
    def load(cls, path: str) -> "EngineConfig":
        return cls.from_json(Path(path).read_text())
