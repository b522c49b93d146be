import json

import pytest
from pydantic import ValidationError

from config import KiB, MiB
from errors import ScenarioError
from main import main
from tebench import BenchScenario, run_cell, run_failure_timeline, run_sensitivity, run_sweep, write_report
from tebench.report import dip_duration_ms, mean_throughput, readmitted_at, throughput_series
from tebench.scenario import FABRICS_DIR
from topology.enums import ClockMode, HealthState, Policy


def scenario(**fields):
    fields.setdefault("iters", 10)
    return BenchScenario(**fields)


def fault_file(tmp_path, faults, name="faults.json"):
    path = tmp_path / name
    path.write_text(json.dumps({"faults": faults}))
    return str(path)


# policies

def test_telemetry_policy_avoids_slow_rails():
    cells = {
        policy: run_cell(scenario(fabric="skewed8", policy=policy, blocks=[4 * MiB], iters=20), 4 * MiB, 1)
        for policy in (Policy.ROUND_ROBIN, Policy.TELEMETRY)
    }
    rr, telemetry = cells[Policy.ROUND_ROBIN], cells[Policy.TELEMETRY]
    assert telemetry.throughput_gbps >= 1.2 * rr.throughput_gbps
    assert telemetry.latency_us(99) <= 0.6 * rr.latency_us(99)
    assert rr.failures == telemetry.failures == 0


def test_single_rail_makes_policies_equal():
    results = [
        run_cell(scenario(fabric="single", policy=policy, blocks=[MiB], iters=5), MiB, 1).throughput_gbps
        for policy in (Policy.ROUND_ROBIN, Policy.HASH, Policy.TELEMETRY)
    ]
    assert max(results) == pytest.approx(min(results), rel=0.01)


def test_spillover_onto_tier_two_for_large_blocks():
    # a cold engine: nothing learned yet about the slower tier-2 paths
    large = run_cell(scenario(fabric="tiered", blocks=[64 * MiB], iters=1, warmup=0), 64 * MiB, 1)
    assert 0.40 <= large.tier_share(1) <= 0.60
    assert large.tier_share(3) == 0.0

    small = run_cell(scenario(fabric="tiered", blocks=[64 * KiB], iters=20), 64 * KiB, 1)
    assert small.tier_share(1) > 0.95


def test_penalty_sensitivity():
    report = run_sensitivity(scenario(fabric="tiered", blocks=[64 * MiB], iters=1, warmup=0,
                                      penalties=[1.0, 3.0, 1e6]))
    loose, moderate, strict = (report.cell(64 * MiB, penalty=p) for p in (1.0, 3.0, 1e6))
    assert 1.0 - strict.tier_share(1) < 0.01
    # spreading evenly pays the tier-2 access cost, staying on rail 0 serializes everything
    assert moderate.latency_us(99) < loose.latency_us(99)
    assert moderate.latency_us(99) < strict.latency_us(99)
    assert report.best_penalty(64 * MiB) == 3.0
    # 64 MiB on rail 0 alone; a quarter each on rails 0-3, three times slower off rail 0
    assert strict.latency_us(99) == pytest.approx(62_500, rel=0.05)
    assert loose.latency_us(99) == pytest.approx(3 * 15_625, rel=0.10)


def test_learned_costs_keep_spillover_ahead_of_one_rail():
    report = run_sensitivity(scenario(fabric="tiered", blocks=[64 * MiB], iters=3, warmup=1,
                                      penalties=[1.0, 3.0, 1e6]))
    strict = report.cell(64 * MiB, penalty=1e6)
    for penalty in (1.0, 3.0):
        assert report.cell(64 * MiB, penalty=penalty).latency_us(99) < strict.latency_us(99)


def test_penalty_is_moot_on_a_uniform_fabric():
    report = run_sensitivity(scenario(fabric="uniform8", blocks=[4 * MiB], iters=5, penalties=[1.0, 1e6]))
    loose, strict = report.cell(4 * MiB, penalty=1.0), report.cell(4 * MiB, penalty=1e6)
    assert loose.throughput_gbps == pytest.approx(strict.throughput_gbps)


def test_larger_batches_never_lower_throughput():
    report = run_sweep(scenario(fabric="uniform8", blocks=[64 * KiB], batches=[1, 4, 16], iters=10))
    series = [report.cell(64 * KiB, batch).throughput_gbps for batch in (1, 4, 16)]
    assert series == sorted(series)
    assert series[-1] > series[0]


# failure timeline

def test_single_rail_outage_is_masked(tmp_path):
    # a compressed shutdown/recovery schedule: rail 0 is down from 40 ms to 120 ms
    faults = fault_file(tmp_path, [{"rail": "node0-r0", "effect": "down", "start_ms": 40, "end_ms": 120}])
    timeline = run_failure_timeline(scenario(
        fabric="uniform8", blocks=[64 * MiB], threads=4, iters=None, duration_s=0.2,
        faults=faults, probe_period_s=0.04,
    ))
    assert timeline.cell.failures == 0

    series = throughput_series(timeline.rows)
    baseline = mean_throughput(series, 10, 40)
    plateau = mean_throughput(series, 60, 110)
    assert plateau / baseline == pytest.approx(7 / 8, rel=0.05)
    assert dip_duration_ms(series, 40, 0.75 * baseline, 10) < 50

    changes = [state.value for _, state in timeline.health_changes("node0-r0")]
    assert changes[0] == "excluded"
    assert changes[-1] == "healthy"
    back = readmitted_at(timeline.transitions, "node0-r0", 0.12)
    assert back is not None
    assert back - 0.12 <= 0.04 + 0.001


def test_total_outage_stalls_without_failures(tmp_path):
    faults = fault_file(tmp_path, [
        {"rail": f"node0-r{r}", "effect": "down", "start_ms": 20, "end_ms": 40} for r in range(8)
    ])
    timeline = run_failure_timeline(scenario(
        fabric="uniform8", blocks=[4 * MiB], threads=2, iters=None, duration_s=0.08,
        faults=faults, probe_period_s=0.01,
    ))
    assert timeline.cell.failures == 0
    series = throughput_series(timeline.rows)
    assert mean_throughput(series, 20, 40) < 0.1 * mean_throughput(series, 0, 20)
    assert mean_throughput(series, 50, 80) > 0


def test_canonical_rail_shutdown_recovers(tmp_path):
    # uniform8 slowed to 10 MiB/s per rail keeps four virtual seconds cheap to simulate
    doc = json.loads((FABRICS_DIR / "uniform8.json").read_text())
    for rail in doc["rails"]:
        rail["bandwidth_bytes_per_sec"] = 10 * MiB
    fabric = tmp_path / "slow8.json"
    fabric.write_text(json.dumps(doc))

    timeline = run_failure_timeline(scenario(
        fabric=str(fabric), blocks=[MiB], threads=2, iters=None, duration_s=4.0,
        faults="rail_shutdown", probe_period_s=1.0,
    ))
    assert timeline.cell.failures == 0

    changes = timeline.health_changes("node0-r0")
    states = [state for _, state in changes]
    assert states[0] is HealthState.EXCLUDED
    assert HealthState.PROBING in states
    assert states[-1] is HealthState.HEALTHY
    assert states.index(HealthState.PROBING) < len(states) - 1
    # down from 1 s to 3 s: excluded once it fails, readmitted within a heartbeat period of recovery
    assert 1.0 <= changes[0][0] < 1.1
    back = readmitted_at(timeline.transitions, "node0-r0", 3.0)
    assert back is not None
    assert back - 3.0 <= 1.0 + 0.01

    series = throughput_series(timeline.rows)
    assert mean_throughput(series, 1500, 2500) > 0.5 * mean_throughput(series, 200, 900)


def test_canonical_fault_schedules_load():
    assert BenchScenario(faults="rail_shutdown", iters=1).faults_path.name == "rail_shutdown.json"
    assert BenchScenario(faults="all_down_100ms", iters=1).faults_path.exists()


# reports

def test_equal_seeds_give_identical_reports(tmp_path):
    faults = fault_file(tmp_path, [{"rail": "node0-r0", "effect": "down", "start_ms": 5, "end_ms": 10}])
    outputs = []
    for run in range(2):
        sweep = run_cell(scenario(fabric="skewed8", blocks=[4 * MiB], iters=5, seed=3), 4 * MiB, 1)
        timeline = run_failure_timeline(scenario(
            fabric="uniform8", blocks=[MiB], iters=None, duration_s=0.03, faults=faults,
            probe_period_s=0.005, seed=3,
        ))
        written = write_report([sweep, timeline.cell], tmp_path / f"run{run}", timeline)
        outputs.append({name: path.read_bytes() for name, path in written.items()})
    assert set(outputs[0]) == {"summary.csv", "rails.csv", "timeline.csv"}
    assert outputs[0] == outputs[1]


def test_scenario_validation(tmp_path):
    with pytest.raises(ValidationError):
        BenchScenario(clock=ClockMode.REAL, backends=["simulated"])
    with pytest.raises(ValidationError):
        BenchScenario(clock=ClockMode.VIRTUAL, backends=["tcp"])
    with pytest.raises(ValidationError):
        BenchScenario(iters=None)
    with pytest.raises(ValidationError):
        BenchScenario(blocks=[0])
    with pytest.raises(ScenarioError):
        BenchScenario.from_json("{not json")
    with pytest.raises(ScenarioError):
        run_failure_timeline(scenario(duration_s=0.01, iters=None))
    with pytest.raises(ScenarioError):
        run_failure_timeline(scenario(faults=fault_file(tmp_path, [])))


def test_cli_sweep_writes_reports(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["--fabric", "single", "--block", "64K,256K", "--iters", "3", "--warmup", "0",
                 "--out", str(out)])
    assert code == 0
    assert (out / "summary.csv").read_text().count("\n") == 3
    assert (out / "rails.csv").exists()
    assert "✅" in capsys.readouterr().out


def test_cli_rejects_bad_scenarios(tmp_path):
    assert main(["--clock", "real", "--backends", "simulated", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        main(["--policy", "fastest"])
