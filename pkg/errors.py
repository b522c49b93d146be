"""
Exception hierarchy for the transfer engine.

Only ``BatchError`` subclasses and ``NoRoute``/``InvalidRange`` ever reach an
application through the batch API; everything else is handled inside the
engine (retry, exclusion, substitution) or signals a programming error.
"""


class RailsprayError(Exception):
    """Base class for all engine errors."""


# Topology

class TopologyError(RailsprayError):
    pass


class TopologyParseError(TopologyError):
    pass


class DanglingReference(TopologyError):
    pass


class NonPositiveBandwidth(TopologyError):
    pass


# Segments

class SegmentError(RailsprayError):
    pass


class DuplicateSegment(SegmentError):
    pass


class OverlappingBuffers(SegmentError):
    pass


class UnknownSegment(SegmentError):
    pass


class InvalidRange(SegmentError):
    pass


# Transports

class TransportError(RailsprayError):
    pass


class CapabilityMismatch(TransportError):
    """A slice was offered to a backend that cannot serve it (caller bug)."""


class FatalBackendError(TransportError):
    """The backend is latched down; nothing it is given will execute."""

    def __init__(self, backend_id: str, reason: str = ""):
        super().__init__(f"backend {backend_id} is fatally down: {reason}")
        self.backend_id = backend_id
        self.reason = reason


class ClockRegression(TransportError):
    pass


# Routing and scheduling

class RoutingError(RailsprayError):
    pass


class NoRoute(RoutingError):
    pass


class AllRoutesExhausted(RoutingError):
    pass


class NoEligibleDevice(RoutingError):
    pass


class NoRemoteRail(RoutingError):
    pass


# Batch API

class BatchError(RailsprayError):
    pass


class UnknownBatch(BatchError):
    pass


class BatchClosed(BatchError):
    pass


class EngineShuttingDown(BatchError):
    pass


# Benchmark driver

class ScenarioError(RailsprayError):
    pass
