from enum import Enum, IntEnum

class Tier(IntEnum):
    """Protocol-independent affinity tier of a rail, relative to a device"""
    DIRECT = 1
    SAME_SOCKET = 2
    CROSS_SOCKET = 3

class Affinity(Enum):
    """Declared affinity class of a device/rail adjacency"""
    DIRECT = "direct"
    SAME_SOCKET = "same_socket"
    CROSS_SOCKET = "cross_socket"

    @property
    def tier(self) -> Tier:
        return _AFFINITY_TIERS[self]

_AFFINITY_TIERS = {
    Affinity.DIRECT: Tier.DIRECT,
    Affinity.SAME_SOCKET: Tier.SAME_SOCKET,
    Affinity.CROSS_SOCKET: Tier.CROSS_SOCKET,
}

class Medium(Enum):
    """Where a segment's bytes live"""
    HOST = "host"
    DEVICE = "device"
    FILE = "file"

class Direction(Enum):
    """Which side initiates a transfer; bytes always flow src -> dst"""
    READ = "read"
    WRITE = "write"

class RailKind(Enum):
    """Declared network rail, or an implicit per-node local channel"""
    NETWORK = "network"
    MEMORY = "memory"
    FILE = "file"

class HealthState(Enum):
    """Link-level health of a rail"""
    HEALTHY = "healthy"
    EXCLUDED = "excluded"
    PROBING = "probing"

class CompletionStatus(Enum):
    """Terminal status of one slice attempt"""
    OK = "ok"
    FAILED = "failed"
    TIMEOUT = "timeout"

class BatchState(Enum):
    """Application-visible batch status"""
    IN_FLIGHT = "in-flight"
    COMPLETE = "complete"
    FAILED = "failed"

class Policy(Enum):
    """Rail selection policy"""
    TELEMETRY = "telemetry"
    ROUND_ROBIN = "rr"
    HASH = "hash"

class ClockMode(Enum):
    """Virtual (simulated, deterministic) or real (wall clock) time"""
    VIRTUAL = "virtual"
    REAL = "real"

class StageKind(Enum):
    """One hop of a staged route"""
    D2H = "d2h"
    H2H = "h2h"
    H2D = "h2d"

class ChunkState(Enum):
    """Where a staged chunk currently sits"""
    FILLING = "filling"
    IN_NETWORK = "in-network"
    DRAINING = "draining"
