from typing import Callable, List, Optional, Sequence, Tuple

from config import ResilienceConfig
from resilience.health import HealthMonitor
from topology.enums import Direction, Medium, RailKind
from topology.graph import Rail, TopologyGraph
from topology.segments import SegmentDescriptor, SegmentRegistry
from transports.base import SliceWorkRequest, TransportBackend
from utils import setup_logger

logger = setup_logger(__name__)

PROBE_BATCH_ID = 0
PROBE_SEGMENT = "__probe__/{node}"
PROBE_FILE_SEGMENT = "__probe_file__/{node}"


class Prober:
    """
    Heartbeats for excluded rails.

    Probes move ``probe_size`` bytes between engine-owned scratch segments, so
    they exercise the real rail without touching user data.
    """

    def __init__(self, graph: TopologyGraph, registry: SegmentRegistry, backends: Sequence[TransportBackend],
                 health: HealthMonitor, config: ResilienceConfig, next_slice_id: Callable[[], int]):
        self.graph = graph
        self.registry = registry
        self.backends = list(backends)
        self.health = health
        self.config = config
        self.next_slice_id = next_slice_id
        self._unprobeable: set = set()

    def ensure_scratch(self) -> None:
        """Register the scratch segments; backends must already be bound to the registry."""
        size = self.config.probe_size
        wants_file = any(b.capabilities.rail_kind is RailKind.FILE for b in self.backends)
        for node_id in self.graph.nodes:
            host_id = PROBE_SEGMENT.format(node=node_id)
            if host_id not in self.registry:
                self.registry.register(SegmentDescriptor.single(host_id, node_id, 2 * size))
            file_id = PROBE_FILE_SEGMENT.format(node=node_id)
            if wants_file and file_id not in self.registry:
                self.registry.register(SegmentDescriptor.single(file_id, node_id, size, Medium.FILE))

    def _backend_for(self, rail: Rail, cross_node: bool) -> Optional[TransportBackend]:
        for backend in self.backends:
            caps = backend.capabilities
            if backend.is_fatal or not backend.serves(rail):
                continue
            if cross_node and caps.cross_node or not cross_node and caps.same_node:
                return backend
        return None

    def _peer_rail(self, rail: Rail, backend: TransportBackend) -> Optional[Rail]:
        for node_id in self.graph.nodes:
            if node_id == rail.node_id:
                continue
            served = [r for r in self.graph.rails_on(node_id, RailKind.NETWORK) if backend.serves(r)]
            if not served:
                continue
            aligned = [r for r in served if r.index == rail.index]
            return aligned[0] if aligned else served[0]
        return None

    def _route(self, rail: Rail) -> Optional[Tuple[TransportBackend, str, str, str]]:
        """(backend, remote rail, source segment, destination segment) for one heartbeat."""
        host = PROBE_SEGMENT.format(node=rail.node_id)
        if rail.kind is RailKind.NETWORK:
            backend = self._backend_for(rail, cross_node=True)
            if backend is not None:
                peer = self._peer_rail(rail, backend)
                if peer is not None:
                    return backend, peer.rail_id, host, PROBE_SEGMENT.format(node=peer.node_id)
            backend = self._backend_for(rail, cross_node=False)
            if backend is not None:
                return backend, rail.rail_id, host, host
            return None
        backend = self._backend_for(rail, cross_node=False)
        if backend is None:
            return None
        if rail.kind is RailKind.FILE:
            target = PROBE_FILE_SEGMENT.format(node=rail.node_id)
            if target not in self.registry:
                return None
            return backend, rail.rail_id, host, target
        return backend, rail.rail_id, host, host

    def probe_excluded(self, now: float) -> List[Tuple[str, SliceWorkRequest]]:
        """
        One heartbeat per excluded rail whose probe timer has elapsed.

        Returns:
            List[Tuple[str, SliceWorkRequest]]: (backend id, request) pairs; empty when nothing is due
        """
        size = self.config.probe_size
        probes = []
        for rail_id in self.health.probes_due(now):
            rail = self.graph.rails[rail_id]
            route = self._route(rail)
            if route is None:
                if rail_id not in self._unprobeable:
                    logger.warning(f"No live backend can probe rail {rail_id}; it stays excluded")
                    self._unprobeable.add(rail_id)
                self.health.postpone_probe(rail_id)
                continue
            backend, remote_rail, src, dst = route
            # host scratch: read the lower half, write the upper half
            dst_offset = 0 if rail.kind is RailKind.FILE else size
            request = SliceWorkRequest(
                slice_id=self.next_slice_id(),
                batch_id=PROBE_BATCH_ID,
                src_segment=src,
                src_offset=0,
                dst_segment=dst,
                dst_offset=dst_offset,
                length=size,
                direction=Direction.WRITE,
                local_rail=rail_id,
                remote_rail=remote_rail,
            )
            self.health.begin_probe(rail_id)
            probes.append((backend.backend_id, request))
        return probes
