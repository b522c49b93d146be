import json
from typing import Dict, List, Optional

import numpy as np
import pytest

from config import (BackendSpec, DatapathConfig, EngineConfig, MiB, ResilienceConfig, SchedulerConfig,
                    StagingConfig, TelemetryConfig)
from datapath.engine import TransferEngine
from topology.enums import ClockMode, Medium
from topology.graph import TopologyGraph, load_topology
from topology.segments import SegmentDescriptor

GiB_PER_S = float(1 << 30)


def fabric_doc(nodes: int = 2, rails: int = 8, bandwidth: float = GiB_PER_S, latency_us: float = 10.0,
               slowdown: Optional[Dict[int, float]] = None, devices: bool = False,
               affinities: Optional[List[str]] = None) -> Dict:
    """A fabric document with ``rails`` network rails per node."""
    slowdown = slowdown or {}
    doc = {"nodes": [], "rails": [], "links": []}
    for n in range(nodes):
        node = {"id": f"node{n}"}
        if devices:
            node["devices"] = [{"id": f"gpu{n}"}]
        doc["nodes"].append(node)
        for r in range(rails):
            simulation = {"latency_us": latency_us}
            if n == 0 and r in slowdown:
                simulation["slowdown"] = slowdown[r]
            doc["rails"].append({
                "id": f"node{n}-r{r}", "node": f"node{n}",
                "bandwidth_bytes_per_sec": bandwidth, "simulation": simulation,
            })
            if devices and affinities is not None:
                doc["links"].append({"device": f"gpu{n}", "rail": f"node{n}-r{r}", "affinity": affinities[r]})
    return doc


@pytest.fixture
def make_graph():
    def _make(**kwargs) -> TopologyGraph:
        return load_topology(json.dumps(fabric_doc(**kwargs)))
    return _make


@pytest.fixture
def small_staging() -> StagingConfig:
    return StagingConfig(chunk_size=1 * MiB, ring_depth=4, pool_bytes=8 * MiB)


@pytest.fixture
def make_engine(small_staging):
    """Engine factory; every engine it builds is shut down after the test."""
    engines = []

    def _make(graph: TopologyGraph, backends=("memory", "simulated"), clock: ClockMode = ClockMode.VIRTUAL,
              scheduler: Optional[SchedulerConfig] = None, resilience: Optional[ResilienceConfig] = None,
              datapath: Optional[DatapathConfig] = None, staging: Optional[StagingConfig] = None,
              telemetry: Optional[TelemetryConfig] = None, seed: int = 0, **kwargs) -> TransferEngine:
        config = EngineConfig(
            clock=clock,
            backends=[b if isinstance(b, BackendSpec) else BackendSpec(kind=b, seed=seed) for b in backends],
            scheduler=scheduler or SchedulerConfig(),
            resilience=resilience or ResilienceConfig(),
            datapath=datapath or DatapathConfig(),
            staging=staging or small_staging,
            telemetry=telemetry or TelemetryConfig(),
        )
        engine = TransferEngine(graph, config, **kwargs).start()
        engines.append(engine)
        return engine

    yield _make
    for engine in engines:
        engine.shutdown()


def fill(engine: TransferEngine, segment_id: str, node_id: str, length: int, seed: int = 0,
         medium: Medium = Medium.HOST, device_id: Optional[str] = None) -> bytes:
    """Register a segment and fill it with seeded random bytes."""
    segment = engine.register_segment(SegmentDescriptor.single(segment_id, node_id, length, medium,
                                                               device_id=device_id))
    data = np.random.default_rng(seed).integers(0, 256, length, dtype=np.uint8).tobytes()
    segment.write(0, data)
    return data


def blank(engine: TransferEngine, segment_id: str, node_id: str, length: int,
          medium: Medium = Medium.HOST, device_id: Optional[str] = None):
    return engine.register_segment(SegmentDescriptor.single(segment_id, node_id, length, medium,
                                                            device_id=device_id))
