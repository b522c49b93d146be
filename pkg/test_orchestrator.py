import pytest

from config import BackendSpec, KiB, MiB
from conftest import blank, fill
from errors import AllRoutesExhausted, InvalidRange, NoRoute
from orchestrator.plan import STAGING_SEGMENT, DirectRoute, StagedRoute
from topology.enums import BatchState, ClockMode, Medium, StageKind, Tier
from transports import FaultSchedule
from transports.faults import FaultEntry

HOST_ONLY_SIM = BackendSpec(kind="simulated", media=[Medium.HOST])


def _copy(engine, src, dst, length, timeout=30.0):
    batch = engine.allocate_batch()
    engine.submit_transfer(batch, src, 0, dst, 0, length)
    return engine.wait_batch(batch, timeout=timeout)


def test_intra_node_copy_is_one_direct_route(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=1, rails=4))
    src = blank(engine, "a", "node0", 4096)
    dst = blank(engine, "b", "node0", 4096)
    plan = engine.orchestrator.build_plan(1, src, 0, dst, 0, 4096)
    assert len(plan.routes) == 1
    route = plan.active
    assert isinstance(route, DirectRoute)
    assert route.backend_ids == ("memory",)
    assert route.best_tier is Tier.DIRECT


def test_device_pair_without_a_device_capable_network_is_staged(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=2, rails=2, devices=True), backends=("memory", HOST_ONLY_SIM))
    src = blank(engine, "a", "node0", MiB, Medium.DEVICE, device_id="gpu0")
    dst = blank(engine, "b", "node1", MiB, Medium.DEVICE, device_id="gpu1")
    plan = engine.orchestrator.build_plan(1, src, 0, dst, 0, MiB)
    route = plan.active
    assert isinstance(route, StagedRoute)
    assert [leg.kind for leg in route.legs] == [StageKind.D2H, StageKind.H2H, StageKind.H2D]
    assert route.backend_ids == ("memory", "simulated")
    assert route.staging_nodes == ("node0", "node1")


def test_direct_route_ranks_ahead_of_staging(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=2, rails=2, devices=True))
    src = blank(engine, "a", "node0", MiB, Medium.DEVICE, device_id="gpu0")
    dst = blank(engine, "b", "node1", MiB, Medium.DEVICE, device_id="gpu1")
    plan = engine.orchestrator.build_plan(1, src, 0, dst, 0, MiB)
    assert isinstance(plan.routes[0], DirectRoute)
    assert any(route.staged for route in plan.routes[1:])


def test_no_route_between_unsupported_media(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=2, rails=2))
    src = blank(engine, "a", "node0", 4096, Medium.FILE)
    dst = blank(engine, "b", "node1", 4096, Medium.FILE)
    with pytest.raises(NoRoute):
        engine.orchestrator.build_plan(1, src, 0, dst, 0, 4096)


def test_plan_rejects_bad_ranges(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=2, rails=2))
    src = blank(engine, "a", "node0", 4096)
    dst = blank(engine, "b", "node1", 4096)
    with pytest.raises(InvalidRange):
        engine.orchestrator.build_plan(1, src, 0, dst, 0, 0)
    with pytest.raises(InvalidRange):
        engine.orchestrator.build_plan(1, src, 4000, dst, 0, 200)


def test_staged_transfer_pipelines_chunks(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=2, rails=2, devices=True), backends=("memory", HOST_ONLY_SIM))
    data = fill(engine, "src", "node0", 16 * MiB, medium=Medium.DEVICE, device_id="gpu0")
    blank(engine, "dst", "node1", 16 * MiB, Medium.DEVICE, device_id="gpu1")
    status = _copy(engine, "src", "dst", 16 * MiB)

    assert status.state is BatchState.COMPLETE
    assert status.total == 16          # one unit per 1 MiB chunk
    assert engine.registry.get("dst").read(0, 16 * MiB) == data
    assert engine.peak_stage_overlap >= 2
    assert not engine.staging.running


def test_staged_transfer_smaller_than_a_chunk(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=2, rails=2, devices=True), backends=("memory", HOST_ONLY_SIM))
    data = fill(engine, "src", "node0", 100 * KiB, medium=Medium.DEVICE, device_id="gpu0")
    blank(engine, "dst", "node1", 100 * KiB, Medium.DEVICE, device_id="gpu1")
    status = _copy(engine, "src", "dst", 100 * KiB)
    assert status.state is BatchState.COMPLETE
    assert status.total == 1
    assert engine.registry.get("dst").read(0, 100 * KiB) == data


def test_staged_transfers_queue_for_rings(make_graph, make_engine):
    # 8 MiB pools of 4 x 1 MiB rings hold two transfers at a time
    engine = make_engine(make_graph(nodes=2, rails=2, devices=True), backends=("memory", HOST_ONLY_SIM))
    batch = engine.allocate_batch()
    expected = {}
    for i in range(3):
        expected[f"dst{i}"] = fill(engine, f"src{i}", "node0", 3 * MiB, seed=i, medium=Medium.DEVICE,
                                   device_id="gpu0")
        blank(engine, f"dst{i}", "node1", 3 * MiB, Medium.DEVICE, device_id="gpu1")
        engine.submit_transfer(batch, f"src{i}", 0, f"dst{i}", 0, 3 * MiB)
    assert len(engine.staging.waiting) == 1

    status = engine.wait_batch(batch, timeout=30.0)
    assert status.state is BatchState.COMPLETE
    for segment_id, data in expected.items():
        assert engine.registry.get(segment_id).read(0, 3 * MiB) == data
    assert all(pool.available == pool.capacity for pool in engine.staging.pools.values())


def test_fatal_backend_mid_transfer_switches_route(make_graph, make_engine):
    backends = ("memory", BackendSpec(kind="simulated", backend_id="sim-a"),
                BackendSpec(kind="simulated", backend_id="sim-b"))
    engine = make_engine(make_graph(nodes=2, rails=4), backends=backends)
    data = fill(engine, "src", "node0", 4 * MiB)
    blank(engine, "dst", "node1", 4 * MiB)
    batch = engine.allocate_batch()
    engine.submit_transfer(batch, "src", 0, "dst", 0, 4 * MiB)
    engine.step()
    engine.latch_backend_fatal("sim-a", "test")

    status = engine.wait_batch(batch, timeout=30.0)
    assert status.state is BatchState.COMPLETE
    assert engine.registry.get("dst").read(0, 4 * MiB) == data


def test_last_backend_dying_fails_the_batch(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=2, rails=4))
    fill(engine, "src", "node0", 4 * MiB)
    blank(engine, "dst", "node1", 4 * MiB)
    batch = engine.allocate_batch()
    engine.submit_transfer(batch, "src", 0, "dst", 0, 4 * MiB)
    engine.step()
    engine.latch_backend_fatal("simulated", "test")

    status = engine.wait_batch(batch, timeout=30.0)
    assert status.state is BatchState.FAILED
    assert "no route left" in status.reason


def test_substitution_bookkeeping(make_graph, make_engine):
    backends = ("memory", BackendSpec(kind="simulated", backend_id="sim-a"),
                BackendSpec(kind="simulated", backend_id="sim-b"))
    engine = make_engine(make_graph(nodes=2, rails=2), backends=backends)
    src = blank(engine, "a", "node0", 4096)
    dst = blank(engine, "b", "node1", 4096)
    plan = engine.orchestrator.build_plan(1, src, 0, dst, 0, 4096)
    assert [route.backend_ids for route in plan.routes] == [("sim-a",), ("sim-b",)]

    engine.orchestrator.substitute_backend(plan, "sim-a", complete=True)
    assert plan.active_index == 0
    # a backend the active route does not use changes nothing
    engine.orchestrator.substitute_backend(plan, "memory")
    assert plan.active_index == 0
    engine.orchestrator.substitute_backend(plan, "sim-a")
    assert plan.active.backend_ids == ("sim-b",)
    with pytest.raises(AllRoutesExhausted):
        engine.orchestrator.substitute_backend(plan, "sim-b")


def test_fatal_memory_backend_falls_back_to_loopback(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=1, rails=2), backends=("memory", "tcp"), clock=ClockMode.REAL)
    data = fill(engine, "src", "node0", 16 * MiB)
    blank(engine, "dst", "node0", 16 * MiB)
    src, dst = engine.registry.get("src"), engine.registry.get("dst")
    assert engine.orchestrator.build_plan(1, src, 0, dst, 0, MiB).active.backend_ids == ("memory",)

    batch = engine.allocate_batch()
    engine.submit_transfer(batch, "src", 0, "dst", 0, 16 * MiB)
    engine.latch_backend_fatal("memory", "test")
    assert engine.orchestrator.build_plan(2, src, 0, dst, 0, MiB).active.backend_ids == ("tcp",)

    status = engine.wait_batch(batch, timeout=30.0)
    assert status.state is BatchState.COMPLETE
    assert dst.read(0, 16 * MiB) == data


def _staged_copy_under(make_graph, make_engine, fault):
    engine = make_engine(make_graph(nodes=2, rails=2, devices=True), backends=("memory", HOST_ONLY_SIM),
                         fault_schedule=FaultSchedule(faults=[fault]))
    data = fill(engine, "src", "node0", 16 * MiB, medium=Medium.DEVICE, device_id="gpu0")
    blank(engine, "dst", "node1", 16 * MiB, Medium.DEVICE, device_id="gpu1")
    return engine, data, _copy(engine, "src", "dst", 16 * MiB)


def test_staging_rail_dies_mid_stream(make_graph, make_engine):
    fault = FaultEntry(rail="node0-r0", effect="down", start_ms=2, end_ms=1000)
    engine, data, status = _staged_copy_under(make_graph, make_engine, fault)

    assert status.state is BatchState.COMPLETE
    assert engine.registry.get("dst").read(0, 16 * MiB) == data
    rails = engine.telemetry_snapshot().rails
    assert rails["node0-r0"].bytes_failed > 0
    assert rails["node0-r1"].bytes_ok > 8 * MiB
    assert all(pool.available == pool.capacity for pool in engine.staging.pools.values())
    assert not engine.staging.running


def test_timed_out_staging_leg_cannot_touch_a_reused_slot(make_graph, make_engine):
    # 64 KiB needs about 0.61 s on r0 once it degrades, so every slice sent there times out
    fault = FaultEntry(rail="node0-r0", effect="degrade", start_ms=2, end_ms=100_000, factor=1e-4)
    engine, data, status = _staged_copy_under(make_graph, make_engine, fault)

    assert status.state is BatchState.COMPLETE
    assert engine.registry.get("dst").read(0, 16 * MiB) == data
    assert engine.telemetry_snapshot().rails["node0-r0"].bytes_failed > 0
    assert all(pool.available == pool.capacity for pool in engine.staging.pools.values())

    owed = [item for worker in engine.workers for item in worker.contexts["simulated"]._heap
            if item.request.batch_id]
    assert owed
    assert all(item.copy_length == 0 and not item.emit for item in owed)

    # the slices still on the wire finish without writing into the staging slots they came from
    staging = engine.registry.get(STAGING_SEGMENT.format(node="node1"))
    before = staging.checksum()
    engine.run_until_idle(limit=engine.clock.now() + 20.0)
    assert staging.checksum() == before
    assert engine.registry.get("dst").read(0, 16 * MiB) == data
