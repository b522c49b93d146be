import numpy as np
import pytest

from config import MiB, ResilienceConfig
from conftest import blank, fill
from telemetry import COLUMNS, TelemetryCollector, export_csv, read_csv, timeline_rows
from telemetry.stats import BUCKETS, HISTOGRAM_EDGES_US, bucket_of, histogram_percentile
from topology.enums import CompletionStatus, HealthState

OK = CompletionStatus.OK


def _collector(rails=("a", "b", "c")):
    return TelemetryCollector(list(rails), window_s=0.01)


def test_idle_collector_reports_zeros(tmp_path):
    snapshot = _collector().snapshot()
    assert snapshot.total_ok == 0
    assert all(r.bytes_posted == r.bytes_failed == 0 for r in snapshot.rails.values())
    assert snapshot.byte_shares() == {"a": 0.0, "b": 0.0, "c": 0.0}

    path = export_csv(snapshot, tmp_path / "empty.csv")
    assert path.read_text().splitlines() == [",".join(COLUMNS)]
    assert read_csv(path) == []


def test_dense_grid_of_windows_and_rails():
    collector = _collector()
    for window in range(10):
        for rail in ("a", "b"):
            collector.record_completion(0, rail, OK, 1000, 20e-6, window * 0.01 + 0.005)
    collector.record_completion(0, "c", OK, 1000, 20e-6, 0.005)
    collector.record_completion(0, "c", OK, 1000, 20e-6, 0.095)

    rows = timeline_rows(collector.snapshot(), rail_order=["a", "b", "c"])
    assert len(rows) == 30
    assert [r["rail_id"] for r in rows[:3]] == ["a", "b", "c"]
    assert [r["window_start_ms"] for r in rows[::3]] == pytest.approx([10.0 * w for w in range(10)])
    # rail c is silent in the middle windows but still gets rows
    assert rows[5]["bytes_ok"] == 0
    assert rows[0]["throughput_gbps"] == pytest.approx(1000 * 8 / 0.01 / 1e9)


def test_coarser_windows_merge_cells():
    collector = _collector()
    for window in range(10):
        collector.record_completion(0, "a", OK, 1000, 20e-6, window * 0.01 + 0.005)
    rows = timeline_rows(collector.snapshot(), window_s=0.02)
    assert len(rows) == 5
    assert {r["bytes_ok"] for r in rows} == {2000}
    with pytest.raises(ValueError):
        timeline_rows(collector.snapshot(), window_s=0.015)


def test_failed_bytes_and_health_column():
    collector = _collector()
    collector.record_completion(0, "a", OK, 500, 20e-6, 0.005)
    collector.record_completion(0, "a", CompletionStatus.FAILED, 700, 20e-6, 0.025)
    collector.record_transition(0.025, "a", HealthState.HEALTHY, HealthState.EXCLUDED, "test")
    rows = timeline_rows(collector.snapshot())
    assert [r["health_state"] for r in rows] == ["healthy", "healthy", "excluded"]
    assert [r["bytes_failed"] for r in rows] == [0, 0, 700]
    assert collector.snapshot().rails["a"].health is HealthState.EXCLUDED


def test_first_queue_sample_in_a_window_wins():
    collector = _collector()
    collector.sample_queues(0.001, {"a": 100})
    collector.sample_queues(0.005, {"a": 999})
    collector.record_completion(0, "a", OK, 10, 20e-6, 0.002)
    rows = timeline_rows(collector.snapshot())
    assert rows[0]["queue_depth_bytes"] == 100
    assert collector.snapshot().rails["a"].queued_bytes == 999


def test_shards_merge_across_workers():
    collector = TelemetryCollector(["a"], window_s=0.01, workers=3)
    for worker in range(3):
        collector.record_post(worker, "a", 100)
        collector.record_completion(worker, "a", OK, 100, 20e-6, 0.001)
    stats = collector.snapshot().rails["a"]
    assert (stats.bytes_posted, stats.bytes_ok, stats.ok_count) == (300, 300, 3)


def test_csv_reads_back(tmp_path):
    collector = _collector()
    collector.record_completion(0, "b", OK, 4096, 15e-6, 0.012)
    path = export_csv(collector.snapshot(), tmp_path / "out" / "timeline.csv")
    [row] = read_csv(path)
    assert row["rail_id"] == "b"
    assert row["window_start_ms"] == pytest.approx(10.0)
    assert row["bytes_ok"] == 4096
    assert row["p50_us"] > 0


def test_histogram_percentile():
    assert histogram_percentile(np.zeros(BUCKETS, dtype=np.int64), 99) == 0.0
    counts = np.zeros(BUCKETS, dtype=np.int64)
    fast, slow = bucket_of(10.0), bucket_of(10_000.0)
    counts[fast] = 98
    counts[slow] = 2
    assert HISTOGRAM_EDGES_US[fast] <= histogram_percentile(counts, 50) <= HISTOGRAM_EDGES_US[fast + 1]
    assert HISTOGRAM_EDGES_US[slow] <= histogram_percentile(counts, 99) <= HISTOGRAM_EDGES_US[slow + 1]
    assert bucket_of(0.01) == 0
    assert bucket_of(1e9) == BUCKETS - 1


def test_engine_bytes_are_payload_plus_heartbeats(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=2, rails=2), resilience=ResilienceConfig(probe_period_s=0.001))
    engine.health.exclude("node0-r1", "test")
    fill(engine, "src", "node0", 4 * MiB)
    blank(engine, "dst", "node1", 4 * MiB)
    batch = engine.allocate_batch()
    engine.submit_transfer(batch, "src", 0, "dst", 0, 4 * MiB)
    engine.wait_batch(batch)
    engine.run_until_idle()

    snapshot = engine.telemetry_snapshot()
    probe_size = engine.config.resilience.probe_size
    assert engine.health.is_healthy("node0-r1")
    assert snapshot.total_ok == 4 * MiB + 2 * probe_size
    assert sum(r.bytes_posted for r in snapshot.rails.values()) == snapshot.total_ok
    assert [t.current for t in snapshot.transitions] == [
        HealthState.EXCLUDED, HealthState.PROBING, HealthState.HEALTHY,
    ]
