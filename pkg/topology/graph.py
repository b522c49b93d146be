import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Dict, List, Literal, Mapping, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from errors import DanglingReference, NonPositiveBandwidth, TopologyParseError
from topology.enums import Affinity, Medium, RailKind, Tier

DEFAULT_MEMORY_BANDWIDTH = 10.0 * (1 << 30)
DEFAULT_FILE_BANDWIDTH = 2.0 * (1 << 30)

MEMORY_RAIL_SUFFIX = "/mem"
FILE_RAIL_SUFFIX = "/file"


# Document schema

class JitterSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    distribution: Literal["exponential", "uniform", "normal", "pareto"]
    scale_us: float = Field(gt=0)
    shape: float = Field(2.0, gt=0)   # pareto only


class RailSimulation(BaseModel):
    """Simulator-only rail behaviour; the scheduler never reads it."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    latency_us: Optional[float] = Field(None, ge=0)
    slowdown: float = Field(1.0, gt=0)
    jitter: Optional[JitterSpec] = None


class LinkSimulation(BaseModel):
    """Simulator-only cost of reaching a rail from a device."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    slowdown: float = Field(1.0, ge=1)


class _DeviceDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    medium: Medium = Medium.DEVICE


class _NodeDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    devices: List[_DeviceDoc] = Field(default_factory=list)
    memory_bandwidth_bytes_per_sec: float = DEFAULT_MEMORY_BANDWIDTH
    file_bandwidth_bytes_per_sec: float = DEFAULT_FILE_BANDWIDTH


class _RailDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    node: str
    bandwidth_bytes_per_sec: float
    affinity: Affinity = Affinity.DIRECT
    transports: Optional[List[str]] = None
    simulation: Optional[RailSimulation] = None


class _LinkDoc(BaseModel):
    model_config = ConfigDict(extra="forbid")

    device: str
    rail: str
    affinity: Affinity
    simulation: Optional[LinkSimulation] = None


class _TopologyDoc(BaseModel):
    # extra="forbid" is what rejects a `segments` section
    model_config = ConfigDict(extra="forbid")

    nodes: List[_NodeDoc] = Field(min_length=1)
    rails: List[_RailDoc] = Field(default_factory=list)
    links: List[_LinkDoc] = Field(default_factory=list)


# Immutable graph

@dataclass(frozen=True)
class Device:
    device_id: str
    node_id: str
    medium: Medium


@dataclass(frozen=True)
class Node:
    node_id: str
    devices: Tuple[Device, ...]
    memory_bandwidth: float
    file_bandwidth: float


@dataclass(frozen=True)
class Rail:
    rail_id: str
    node_id: str
    index: int
    bandwidth: float
    affinity: Affinity
    kind: RailKind = RailKind.NETWORK
    transports: Optional[Tuple[str, ...]] = None
    simulation: Optional[RailSimulation] = None

    @property
    def tier(self) -> Tier:
        return self.affinity.tier

    def allows(self, backend_kind: str) -> bool:
        return self.transports is None or backend_kind in self.transports


@dataclass(frozen=True)
class Link:
    device_id: str
    rail_id: str
    affinity: Affinity
    simulation: Optional[LinkSimulation] = None


@dataclass(frozen=True)
class TopologyGraph:
    """
    Immutable fabric description: nodes, devices, rails and device/rail links.

    Every node also carries two implicit tier-1 rails, ``<node>/mem`` and
    ``<node>/file``, used by the intra-node memory and file backends. Runtime
    health never lives here.
    """

    nodes: Mapping[str, Node]
    rails: Mapping[str, Rail]
    devices: Mapping[str, Device]
    links: Mapping[Tuple[str, str], Link]
    rail_order: Tuple[str, ...] = field(default=())

    def rails_on(self, node_id: str, kind: Optional[RailKind] = None) -> Tuple[Rail, ...]:
        return tuple(
            self.rails[rail_id] for rail_id in self.rail_order
            if self.rails[rail_id].node_id == node_id and (kind is None or self.rails[rail_id].kind is kind)
        )

    def network_rails(self) -> Tuple[Rail, ...]:
        return tuple(self.rails[r] for r in self.rail_order if self.rails[r].kind is RailKind.NETWORK)

    def tier_of(self, rail_id: str, device_id: Optional[str] = None) -> Tier:
        """Tier of a rail as seen from a device; falls back to the rail's own affinity."""
        rail = self.rails[rail_id]
        if device_id is not None:
            link = self.links.get((device_id, rail_id))
            if link is not None:
                return link.affinity.tier
        return rail.tier

    def ordinal(self, rail_id: str) -> int:
        return self.rail_order.index(rail_id)

    def memory_rail(self, node_id: str) -> Rail:
        return self.rails[node_id + MEMORY_RAIL_SUFFIX]

    def file_rail(self, node_id: str) -> Rail:
        return self.rails[node_id + FILE_RAIL_SUFFIX]

    def to_document(self) -> Dict:
        nodes = []
        for node in self.nodes.values():
            nodes.append({
                "id": node.node_id,
                "devices": [{"id": d.device_id, "medium": d.medium.value} for d in node.devices],
                "memory_bandwidth_bytes_per_sec": node.memory_bandwidth,
                "file_bandwidth_bytes_per_sec": node.file_bandwidth,
            })
        rails = []
        for rail in self.network_rails():
            doc = {
                "id": rail.rail_id,
                "node": rail.node_id,
                "bandwidth_bytes_per_sec": rail.bandwidth,
                "affinity": rail.affinity.value,
            }
            if rail.transports is not None:
                doc["transports"] = list(rail.transports)
            if rail.simulation is not None:
                doc["simulation"] = rail.simulation.model_dump(mode="json", exclude_none=True)
            rails.append(doc)
        links = []
        for link in self.links.values():
            doc = {"device": link.device_id, "rail": link.rail_id, "affinity": link.affinity.value}
            if link.simulation is not None:
                doc["simulation"] = link.simulation.model_dump(mode="json")
            links.append(doc)
        return {"nodes": nodes, "rails": rails, "links": links}

    def serialize(self) -> str:
        """Canonical JSON; reloading the same document yields the same string."""
        return json.dumps(self.to_document(), sort_keys=True, separators=(",", ":"))


def load_topology(text: str) -> TopologyGraph:
    """
    Parse and validate a topology document.

    Args:
        text: JSON document with ``nodes``, ``rails`` and optional ``links``

    Returns:
        TopologyGraph: immutable graph with every rail assigned a tier

    Raises:
        TopologyParseError: malformed JSON, unknown keys (including ``segments``) or duplicate ids
        DanglingReference: a rail or link refers to something that does not exist
        NonPositiveBandwidth: a rail or node bandwidth is <= 0
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise TopologyParseError(f"topology is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise TopologyParseError("topology document must be an object")
    try:
        doc = _TopologyDoc.model_validate(raw)
    except ValidationError as e:
        raise TopologyParseError(f"invalid topology document: {e}") from e
    return _build_graph(doc)


def load_topology_file(path: Union[str, Path]) -> TopologyGraph:
    return load_topology(Path(path).read_text())


def _build_graph(doc: _TopologyDoc) -> TopologyGraph:
    nodes: Dict[str, Node] = {}
    devices: Dict[str, Device] = {}
    for node_doc in doc.nodes:
        if node_doc.id in nodes:
            raise TopologyParseError(f"duplicate node id: {node_doc.id}")
        for label, value in (("memory", node_doc.memory_bandwidth_bytes_per_sec),
                             ("file", node_doc.file_bandwidth_bytes_per_sec)):
            if value <= 0:
                raise NonPositiveBandwidth(f"node {node_doc.id} {label} bandwidth must be > 0, got {value}")
        node_devices = []
        for device_doc in node_doc.devices:
            if device_doc.id in devices:
                raise TopologyParseError(f"duplicate device id: {device_doc.id}")
            device = Device(device_doc.id, node_doc.id, device_doc.medium)
            devices[device.device_id] = device
            node_devices.append(device)
        nodes[node_doc.id] = Node(
            node_id=node_doc.id,
            devices=tuple(node_devices),
            memory_bandwidth=node_doc.memory_bandwidth_bytes_per_sec,
            file_bandwidth=node_doc.file_bandwidth_bytes_per_sec,
        )

    rails: Dict[str, Rail] = {}
    per_node_index: Dict[str, int] = {node_id: 0 for node_id in nodes}
    for rail_doc in doc.rails:
        if rail_doc.id in rails or rail_doc.id.endswith((MEMORY_RAIL_SUFFIX, FILE_RAIL_SUFFIX)):
            raise TopologyParseError(f"duplicate or reserved rail id: {rail_doc.id}")
        if rail_doc.node not in nodes:
            raise DanglingReference(f"rail {rail_doc.id} refers to unknown node {rail_doc.node}")
        if rail_doc.bandwidth_bytes_per_sec <= 0:
            raise NonPositiveBandwidth(
                f"rail {rail_doc.id} bandwidth must be > 0, got {rail_doc.bandwidth_bytes_per_sec}"
            )
        rails[rail_doc.id] = Rail(
            rail_id=rail_doc.id,
            node_id=rail_doc.node,
            index=per_node_index[rail_doc.node],
            bandwidth=rail_doc.bandwidth_bytes_per_sec,
            affinity=rail_doc.affinity,
            transports=tuple(rail_doc.transports) if rail_doc.transports is not None else None,
            simulation=rail_doc.simulation,
        )
        per_node_index[rail_doc.node] += 1

    order: List[str] = []
    for node in nodes.values():
        order.extend(r.rail_id for r in rails.values() if r.node_id == node.node_id)
        for suffix, kind, bandwidth in ((MEMORY_RAIL_SUFFIX, RailKind.MEMORY, node.memory_bandwidth),
                                        (FILE_RAIL_SUFFIX, RailKind.FILE, node.file_bandwidth)):
            local = Rail(node.node_id + suffix, node.node_id, 0, bandwidth, Affinity.DIRECT, kind)
            rails[local.rail_id] = local
            order.append(local.rail_id)

    links: Dict[Tuple[str, str], Link] = {}
    for link_doc in doc.links:
        if link_doc.device not in devices:
            raise DanglingReference(f"link refers to unknown device {link_doc.device}")
        if link_doc.rail not in rails:
            raise DanglingReference(f"link refers to unknown rail {link_doc.rail}")
        if devices[link_doc.device].node_id != rails[link_doc.rail].node_id:
            raise DanglingReference(
                f"link {link_doc.device} <-> {link_doc.rail} crosses nodes"
            )
        key = (link_doc.device, link_doc.rail)
        if key in links:
            raise TopologyParseError(f"duplicate link: {key}")
        links[key] = Link(link_doc.device, link_doc.rail, link_doc.affinity, link_doc.simulation)

    return TopologyGraph(
        nodes=MappingProxyType(nodes),
        rails=MappingProxyType(rails),
        devices=MappingProxyType(devices),
        links=MappingProxyType(links),
        rail_order=tuple(order),
    )
