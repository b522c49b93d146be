import sys
from typing import List, Optional

from errors import RailsprayError
from tebench.scenario import FABRICS_DIR, resolve_document
from topology.enums import RailKind
from topology.graph import TopologyGraph, load_topology_file
from utils import human_bytes


def describe_fabric(graph: TopologyGraph) -> List[str]:
    """One line per node, device and network rail, with each rail's tier as seen by each local device."""
    lines = []
    for node in graph.nodes.values():
        lines.append(f"  🖥️ {node.node_id}: {len(node.devices)} devices, "
                     f"memory {human_bytes(int(node.memory_bandwidth))}/s, "
                     f"file {human_bytes(int(node.file_bandwidth))}/s")
        for rail in graph.rails_on(node.node_id, RailKind.NETWORK):
            tiers = ", ".join(
                f"{device.device_id}=T{int(graph.tier_of(rail.rail_id, device.device_id))}"
                for device in node.devices
            )
            suffix = f" [{tiers}]" if tiers else f" [T{int(rail.tier)}]"
            lines.append(f"    🔌 {rail.rail_id}: {human_bytes(int(rail.bandwidth))}/s{suffix}")
    return lines


def initialize_fabric(name_or_path: str) -> TopologyGraph:
    """Validate a fabric document and print its rails."""
    print(f"🚀 Validating fabric {name_or_path}...")
    try:
        graph = load_topology_file(resolve_document(name_or_path, FABRICS_DIR))
    except RailsprayError as e:
        print(f"❌ Error loading fabric: {e}")
        raise

    print("✅ Fabric is valid!")
    print(f"\n📊 {len(graph.nodes)} nodes, {len(graph.devices)} devices, "
          f"{len(graph.network_rails())} network rails, {len(graph.links)} links")
    for line in describe_fabric(graph):
        print(line)
    return graph


def main(argv: Optional[List[str]] = None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if len(args) != 1:
        print("usage: initialize.py <fabric.json | canonical name>")
        return 2
    try:
        initialize_fabric(args[0])
    except RailsprayError:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
