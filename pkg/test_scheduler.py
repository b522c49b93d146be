import threading

import numpy as np
import pytest

from config import GiB, KiB, MiB, SchedulerConfig
from errors import NoEligibleDevice, NoRemoteRail
from conftest import blank
from scheduler import (CostModel, GlobalLoadBoard, HashPolicy, RoundRobinPolicy, TelemetryPolicy, choose_rail,
                       decompose, feedback, map_remote, predict_completion)
from scheduler.cost_model import FEEDBACK_EPSILON, RailCostState, effective_queue
from topology.enums import HealthState, Policy, Tier
from topology.reachability import reachable_rails

B = float(1 << 30)
L = 64 * KiB


def state(rail_id, tier=Tier.DIRECT, bandwidth=B, beta0=0.0, beta1=1.0, queued=0, health=HealthState.HEALTHY):
    return RailCostState(rail_id, bandwidth, tier, beta0, beta1, queued, health)


# decomposition

@pytest.mark.parametrize("total, count, size", [
    (1 * MiB, 16, 64 * KiB),
    (10 * KiB, 1, 10 * KiB),
    (1 * GiB, 4096, 256 * KiB),
])
def test_decompose(total, count, size):
    slices = decompose(total, SchedulerConfig())
    assert len(slices) == count
    assert slices[0] == (0, size)
    assert sum(length for _, length in slices) == total


def test_decompose_last_slice_is_short():
    slices = decompose(MiB + 100, SchedulerConfig())
    assert slices[-1] == (MiB, 100)
    assert all(length == 64 * KiB for _, length in slices[:-1])


def test_decompose_rejects_empty():
    with pytest.raises(ValueError):
        decompose(0, SchedulerConfig())


# prediction

def test_predict_completion_examples():
    assert predict_completion(state("a", bandwidth=B), int(B)) == pytest.approx(1.0)
    assert predict_completion(state("a", bandwidth=100, beta0=0.5, beta1=2.0, queued=100), 100) == pytest.approx(4.5)
    assert predict_completion(state("a", beta0=7.0, beta1=1e-12), 1) == pytest.approx(7.0)


# rail choice

def test_tier_penalty_prefers_direct_rail():
    states = {"d1": state("d1"), "d2": state("d2", Tier.SAME_SOCKET)}
    choice, window = choose_rail(L, [("d1", Tier.DIRECT), ("d2", Tier.SAME_SOCKET)], states, SchedulerConfig(), 0)
    assert choice.rail_id == "d1"
    assert [c.rail_id for c in window] == ["d1"]


def test_load_aware_spillover():
    states = {"d1": state("d1", queued=5 * L), "d2": state("d2", Tier.SAME_SOCKET)}
    choice, _ = choose_rail(L, [("d1", Tier.DIRECT), ("d2", Tier.SAME_SOCKET)], states, SchedulerConfig(), 0)
    assert choice.rail_id == "d2"
    assert choice.score == pytest.approx(3 * L / B)


def test_no_candidates():
    with pytest.raises(NoEligibleDevice):
        choose_rail(L, [], {}, SchedulerConfig(), 0)


def test_unhealthy_and_tier_three_are_ineligible():
    states = {"a": state("a", health=HealthState.EXCLUDED), "b": state("b", Tier.CROSS_SOCKET)}
    with pytest.raises(NoEligibleDevice):
        choose_rail(L, [("a", Tier.DIRECT), ("b", Tier.CROSS_SOCKET)], states, SchedulerConfig(), 0)


def test_identical_rails_alternate():
    config = SchedulerConfig()
    cost = CostModel([], config)
    cost.states = {"a": state("a"), "b": state("b")}
    picks = []
    for _ in range(4):
        choice = cost.choose(L, [("a", Tier.DIRECT), ("b", Tier.DIRECT)])
        cost.release(choice.rail_id, L)
        picks.append(choice.rail_id)
    assert picks == ["a", "b", "a", "b"]


def test_choice_stays_within_tolerance_of_best():
    """Independent re-evaluation of every score over random states."""
    rng = np.random.default_rng(1234)
    config = SchedulerConfig()
    penalties = {1: 1.0, 2: 3.0}
    for trial in range(10_000):
        count = int(rng.integers(1, 9))
        states, candidates = {}, []
        for i in range(count):
            tier = Tier(int(rng.integers(1, 3)))
            rail_id = f"r{i}"
            states[rail_id] = state(rail_id, tier, bandwidth=float(rng.uniform(1e8, 1e10)),
                                    beta0=float(rng.uniform(0, 1e-4)), beta1=float(rng.uniform(0.1, 5.0)),
                                    queued=int(rng.integers(0, 64 * MiB)))
            candidates.append((rail_id, tier))
        length = int(rng.integers(1, 4 * MiB))
        choice, _ = choose_rail(length, candidates, states, config, int(rng.integers(0, 100)))

        scores = []
        for rail_id, tier in candidates:
            s = states[rail_id]
            scores.append(penalties[int(tier)] * (s.beta0 + s.beta1 * (s.queued_bytes + length) / s.bandwidth))
        chosen_tier = dict(candidates)[choice.rail_id]
        chosen = states[choice.rail_id]
        recomputed = penalties[int(chosen_tier)] * (
            chosen.beta0 + chosen.beta1 * (chosen.queued_bytes + length) / chosen.bandwidth
        )
        assert recomputed <= (1 + config.tolerance) * min(scores) * (1 + 1e-12), f"trial {trial}"


# feedback

def test_exact_observation_is_a_fixed_point():
    config = SchedulerConfig()
    s = state("a", beta0=2e-5, queued=L)
    x = L / B
    feedback(s, 2e-5 + x, 2e-5 + x, L, 0, config)
    assert s.beta1 == pytest.approx(1.0)
    assert s.beta0 == pytest.approx(2e-5)
    assert s.queued_bytes == 0


def test_degraded_rail_converges():
    config = SchedulerConfig()
    s = state("a")
    x = L / B
    for _ in range(20):
        s.queued_bytes = L
        feedback(s, 4 * x, predict_completion(s, L, 0), L, 0, config)
    assert predict_completion(s, L, 0) == pytest.approx(4 * x, rel=0.10)


def test_single_outlier_is_bounded():
    config = SchedulerConfig()
    s = state("a")
    x = L / B
    feedback(s, x, x, L, 0, config)
    before = predict_completion(s, L, 0)
    feedback(s, 10 * x, before, L, 0, config)
    assert s.beta1 - 1.0 <= config.ewma_alpha * 10
    assert predict_completion(s, L, 0) <= 2 * before


def test_instant_observations_floor_beta1():
    config = SchedulerConfig()
    s = state("a", beta0=1e-3)
    for _ in range(100):
        s.queued_bytes = L
        feedback(s, 0.0, predict_completion(s, L, 0), L, 0, config)
    assert s.beta1 >= FEEDBACK_EPSILON
    assert s.beta1 == pytest.approx(FEEDBACK_EPSILON, rel=0.01)
    assert predict_completion(s, L, 0) > 0


def test_periodic_reset_keeps_queues():
    class _Rail:
        def __init__(self, rail_id):
            self.rail_id, self.bandwidth, self.tier = rail_id, B, Tier.DIRECT

    cost = CostModel([_Rail("a")], SchedulerConfig(), now=0.0)
    cost.states["a"].beta1 = 3.0
    cost.states["a"].beta0 = 1e-3
    cost.states["a"].queued_bytes = 12345
    assert cost.periodic_reset(10.0) == []
    assert cost.states["a"].beta1 == 3.0
    assert cost.periodic_reset(30.0) == ["a"]
    assert (cost.states["a"].beta0, cost.states["a"].beta1) == (0.0, 1.0)
    assert cost.states["a"].queued_bytes == 12345


def test_readmission_reset_waits_for_the_cost_lock():
    cost = _two_rail_cost(SchedulerConfig())
    cost.states["a"].beta1 = 3.0
    with cost._lock:
        resetter = threading.Thread(target=cost.reset_rail, args=("a", 1.0))
        resetter.start()
        resetter.join(0.05)
        assert resetter.is_alive()
        assert cost.states["a"].beta1 == 3.0
    resetter.join(5.0)
    assert not resetter.is_alive()
    assert (cost.states["a"].beta1, cost.states["a"].last_reset) == (1.0, 1.0)


def test_resets_interleaved_with_feedback_keep_accounts_whole():
    cost = _two_rail_cost(SchedulerConfig())
    candidates = [("a", Tier.DIRECT), ("b", Tier.DIRECT), ("c", Tier.DIRECT)]
    x = L / B

    def traffic():
        for _ in range(500):
            choice = cost.choose(L, candidates)
            cost.feedback(choice.rail_id, 3 * x, choice.predicted, L, choice.queued_at_dispatch)

    def resets():
        for i in range(500):
            cost.reset_rail("abc"[i % 3], float(i))

    threads = [threading.Thread(target=traffic) for _ in range(4)] + [threading.Thread(target=resets)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()

    assert cost.total_queued() == 0
    assert cost.cursor == 4 * 500
    for s in cost.states.values():
        assert np.isfinite(s.beta1) and s.beta1 > 0
        assert s.beta0 >= 0


# baselines

def _two_rail_cost(config):
    cost = CostModel([], config)
    cost.states = {"a": state("a"), "b": state("b"), "c": state("c")}
    return cost


def test_round_robin_ignores_load():
    config = SchedulerConfig(policy=Policy.ROUND_ROBIN)
    cost = _two_rail_cost(config)
    cost.states["a"].queued_bytes = 100 * MiB
    policy = RoundRobinPolicy(cost, config)
    candidates = [("a", Tier.DIRECT), ("b", Tier.DIRECT), ("c", Tier.DIRECT)]
    assert [policy.select(L, 0, candidates).rail_id for _ in range(4)] == ["a", "b", "c", "a"]


def test_hash_uses_slice_offset():
    config = SchedulerConfig(policy=Policy.HASH)
    policy = HashPolicy(_two_rail_cost(config), config)
    candidates = [("a", Tier.DIRECT), ("b", Tier.DIRECT), ("c", Tier.DIRECT)]
    picks = [policy.select(L, k * L, candidates).rail_id for k in range(4)]
    assert picks == ["a", "b", "c", "a"]
    assert policy.select(L, L, candidates).rail_id == "b"


def test_telemetry_policy_charges_queue():
    config = SchedulerConfig()
    cost = _two_rail_cost(config)
    TelemetryPolicy(cost, config).select(L, 0, [("b", Tier.DIRECT)])
    assert cost.states["b"].queued_bytes == L


# remote mapping

def test_remote_mapping(make_graph, make_engine):
    engine = make_engine(make_graph(nodes=2, rails=4))
    src = blank(engine, "a", "node0", 4096)
    dst = blank(engine, "b", "node1", 4096)
    entries = reachable_rails(engine.graph, engine.backends, src, dst)

    assert map_remote(engine.graph, "node0-r2", entries, lambda r: True) == "node1-r2"
    down = {"node1-r2"}
    assert map_remote(engine.graph, "node0-r2", entries, lambda r: r not in down) == "node1-r1"
    down = {"node1-r1", "node1-r2"}
    assert map_remote(engine.graph, "node0-r2", entries, lambda r: r not in down) == "node1-r3"
    with pytest.raises(NoRemoteRail):
        map_remote(engine.graph, "node0-r2", entries, lambda r: not r.startswith("node1"))


# global load board

def test_load_board_sums_fresh_publishers():
    board = GlobalLoadBoard(publish_period_s=0.01)
    board.publish("e1", {"a": 100, "b": 10}, now=0.0)
    board.publish("e2", {"a": 50}, now=0.02)
    assert board.global_load(0.025) == {"a": 150.0, "b": 10.0}
    # e1 is older than three periods by now
    assert board.global_load(0.045) == {"a": 50.0}
    assert board.publishers(0.045) == 1


def test_diffusion_blends_local_and_global():
    s = state("a", queued=100)
    assert effective_queue(s, SchedulerConfig(), {"a": 1000.0}) == 100
    blended = effective_queue(s, SchedulerConfig(diffusion_weight=0.5), {"a": 1000.0})
    assert blended == pytest.approx(550.0)
