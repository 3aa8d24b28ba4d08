import json

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from fedsim.core import ParamVector, evaluate
from fedsim.errors import InvariantViolation, ScenarioParseError, ScenarioValidationError
from fedsim.model_mgmt import compress
from fedsim.simulator import (
    EventQueue,
    DeviceProfile,
    LifecycleState,
    MetricsStream,
    is_legal,
    parse_scenario,
    run_scenario,
    sample_dropout,
    summarize,
    transfer_time,
    validate_scenario,
)

FAST = {"compute_capacity": 1000.0, "bandwidth": 100.0, "base_latency": 5.0, "dropout_prob": 0.0}


def _scenario(**over):
    doc = {"rounds": 4, "data": {"n_clients": 4, "samples_per_client": 30}, "convergence": {"enabled": False}}
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(doc.get(key), dict):
            doc[key] = {**doc[key], **value}
        else:
            doc[key] = value
    return validate_scenario(doc)


KINDS = {
    "fedavg": {},
    "secure": {"aggregator": {"kind": "secure"}},
    "async": {"aggregator": {"kind": "async", "async": {"min_updates": 2}}},
    "gossip": {"aggregator": {"kind": "gossip", "gossip": {"topology": "ring"}}},
    "hierarchical": {"aggregator": {"kind": "hierarchical", "hierarchical": {"k1": 2, "k2": 1}}},
}


# ---- profiles and events --------------------------------------------------


def test_transfer_time_examples():
    assert transfer_time(0, DeviceProfile(bandwidth=10.0, base_latency=5.0)) == 5.0
    assert transfer_time(1000, DeviceProfile(bandwidth=10.0, base_latency=5.0)) == 105.0


def test_compressed_upload_is_faster():
    v = ParamVector(np.random.default_rng(0).normal(size=100))
    prof = DeviceProfile(bandwidth=50.0)
    raw = compress(v, "none").compressed_bytes
    small = compress(v, "topk", k=v.dim // 10).compressed_bytes
    assert transfer_time(small, prof) < transfer_time(raw, prof)


def test_dropout_zero_never_fires():
    assert not any(sample_dropout("c", r, 1, 0.0) for r in range(10_000))


def test_dropout_near_one_fires_quickly():
    assert any(sample_dropout("c", r, 1, 1 - 1e-9) for r in range(100))


def test_dropout_rate_monte_carlo():
    rate = np.mean([sample_dropout("c", r, 3, 0.3) for r in range(10_000)])
    assert abs(rate - 0.3) <= 0.02


def test_event_queue_orders_by_time_then_sequence():
    q = EventQueue()
    q.schedule(5.0, "train_done", "b")
    q.schedule(1.0, "train_done", "a")
    q.schedule(5.0, "upload_done", "c")
    out = [q.pop() for _ in range(3)]
    assert [e.subject for e in out] == ["a", "b", "c"]
    assert q.now == 5.0
    with pytest.raises(InvariantViolation):
        q.schedule(4.0, "evaluate", "x")


def test_lifecycle_graph_edges():
    S = LifecycleState
    assert is_legal(S.REPLACED, S.TASK_CREATED)
    assert not is_legal(S.TASK_CREATED, S.AGGREGATED)
    assert not is_legal(S.DEPLOYED, S.BROADCAST)


# ---- scenario validation --------------------------------------------------


def test_rounds_zero_emits_only_creation_and_broadcast():
    r = run_scenario(_scenario(rounds=0))
    assert [m.event for m in r.metrics] == ["task_created", "broadcast"]


def test_unknown_key_reports_path():
    with pytest.raises(ScenarioValidationError) as info:
        validate_scenario({"data": {"n_clients": 3, "n_clinets": 4}})
    assert any(path == "data.n_clinets" for path, _ in info.value.problems)


def test_disconnected_gossip_topology_rejected():
    doc = {"data": {"n_clients": 6}, "aggregator": {"kind": "gossip", "gossip": {"topology": "random_regular", "degree": 1}}}
    with pytest.raises(ScenarioValidationError) as info:
        validate_scenario(doc)
    assert any(path == "aggregator.gossip.topology" for path, _ in info.value.problems)


def test_edge_groups_must_partition_clients():
    groups = {"e0": ["c000", "c001"], "e1": ["c001"]}
    doc = {"data": {"n_clients": 3}, "aggregator": {"kind": "hierarchical", "hierarchical": {"edge_groups": groups}}}
    with pytest.raises(ScenarioValidationError) as info:
        validate_scenario(doc)
    msgs = " ".join(m for _, m in info.value.problems)
    assert "also on" in msgs and "without an edge" in msgs


def test_every_problem_is_reported():
    with pytest.raises(ScenarioValidationError) as info:
        validate_scenario({"rounds": -1, "selection": {"mode": "vibes"}})
    paths = {p for p, _ in info.value.problems}
    assert {"rounds", "selection.mode"} <= paths


def test_malformed_json_is_parse_error():
    with pytest.raises(ScenarioParseError):
        parse_scenario('{"rounds": 3,')


def test_scenario_json_roundtrip():
    s = _scenario(**KINDS["async"])
    assert parse_scenario(s.to_json()) == s


# ---- whole-run invariants -------------------------------------------------


@pytest.fixture(scope="module", params=sorted(KINDS))
def run(request):
    extra = dict(KINDS[request.param])
    extra["devices"] = {"dropout_prob": 0.2}
    return run_scenario(_scenario(seed=7, **extra))


def test_runs_are_byte_deterministic(run):
    again = run_scenario(run.scenario)
    assert again.metrics_jsonl() == run.metrics_jsonl()
    assert again.coversion.log.to_bytes() == run.coversion.log.to_bytes()


def test_lifecycle_legality(run):
    hist = run.lifecycle
    assert hist[0] is LifecycleState.TASK_CREATED
    for a, b in zip(hist, hist[1:]):
        assert is_legal(a, b), (a, b)


def test_clock_is_monotone(run):
    times = [m.virtual_time_ms for m in run.metrics]
    assert all(b >= a for a, b in zip(times, times[1:]))


def test_chain_verifies_and_summary_folds(run):
    run.coversion.verify()
    records = MetricsStream.parse(run.metrics_jsonl())
    folded = summarize(records)
    for key, value in folded.items():
        assert run.summary[key] == value


def test_metrics_lines_are_plain_json(run):
    for line in run.metrics_jsonl().splitlines():
        doc = json.loads(line)
        assert {"round", "virtual_time_ms", "event", "bytes_up", "bytes_down", "aggregator", "extra"} <= set(doc)


def test_participant_conservation_sync():
    r = run_scenario(_scenario(seed=3, rounds=8, devices={"dropout_prob": 0.3}))
    by_round = {}
    for m in r.metrics:
        if m.event == "broadcast" and m.round > 0:
            assert m.participants + m.dropouts == m.extra["selected"]
            by_round[m.round] = m.participants
        if m.event == "aggregate":
            assert m.participants == by_round[m.round]
    assert sum(m.dropouts for m in r.metrics) > 0


def test_participant_conservation_async():
    slow = {**FAST, "compute_capacity": 50.0}
    per_client = [{**FAST, "dropout_prob": 0.3}, FAST, FAST, slow]
    s = _scenario(
        rounds=8,
        seed=4,
        data={"n_clients": 4, "samples_per_client": 20},
        devices={"per_client": per_client},
        **KINDS["async"],
    )
    dropped, closes = {}, []
    for m in run_scenario(s).metrics:
        if m.event == "broadcast" and m.round > 0:
            dropped[m.round] = m.dropouts
        if m.event == "evaluate" and "deferred" in m.extra:
            closes.append((m.round, m.extra))
    assert len(closes) == 8
    for rnd, e in closes:
        assert e["aggregated"] + e["deferred"] + dropped[rnd] == e["selected"]
    assert any(e["deferred"] for _, e in closes) and any(dropped.values())


def test_async_deferred_update_joins_next_version():
    per_client = [FAST, FAST, {**FAST, "compute_capacity": 50.0}]
    s = _scenario(rounds=3, data={"n_clients": 3, "samples_per_client": 20}, devices={"per_client": per_client}, **KINDS["async"])
    reg = run_scenario(s).coversion
    assert [c for c, _ in reg.lineage(1)] == ["c000", "c001"]
    assert ("c002", 1) in reg.lineage(2)


@pytest.mark.parametrize("scheme", ["none", "topk"])
def test_byte_accounting(scheme):
    comp = {"scheme": scheme, "k": 3} if scheme == "topk" else {"scheme": "none"}
    r = run_scenario(_scenario(seed=1, compression=comp, devices={"dropout_prob": 0.25}))
    dim = r.scenario.dim
    per_upload = 5 + 4 + 3 * (2 + 8) if scheme == "topk" else 8 * dim
    uploads = [m for m in r.metrics if m.event == "upload_done"]
    assert sum(m.bytes_up for m in r.metrics) == per_upload * len(uploads) == r.summary["total_bytes_up"]


def test_compression_lowers_bytes_for_same_rounds():
    base = {"data": {"n_clients": 4, "n_features": 49, "samples_per_client": 30}}
    plain = run_scenario(_scenario(**base)).summary["total_bytes_up"]
    packed = run_scenario(_scenario(compression={"scheme": "topk", "k_fraction": 0.1}, **base)).summary["total_bytes_up"]
    assert packed <= 0.2 * plain


def test_seed_changes_the_run():
    a = run_scenario(_scenario(seed=1)).metrics_jsonl()
    b = run_scenario(_scenario(seed=2)).metrics_jsonl()
    assert a != b


# ---- pattern flows --------------------------------------------------------


def _clustered():
    return run_scenario(
        validate_scenario(
            {
                "seed": 11,
                "rounds": 20,
                "data": {"n_clients": 8, "concept_modes": 2},
                "clustering": {"enabled": True, "after_rounds": 0},
                "convergence": {"enabled": False},
            }
        )
    )


def test_cluster_matched_deployment():
    r = _clustered()
    ids = sorted(r.client_data)
    truth = [int(c[1:]) % 2 for c in ids]
    assert adjusted_rand_score(truth, r.cluster_assignment.labels(ids)) == 1.0
    models = {k: r.models_by_digest[d] for k, d in r.deployment.assignments.items()}
    other = {}
    for c in ids:
        mismatched = [m for k, m in models.items() if r.cluster_assignment.assignments[k] != r.cluster_assignment.assignments[c]]
        other[c] = mismatched[0]
    for c in ids:
        matched = evaluate(models[c], r.client_data[c]).loss
        assert matched <= evaluate(other[c], r.client_data[c]).loss


def test_trigger_replaces_model_after_drift():
    s = validate_scenario(
        {
            "seed": 2,
            "rounds": 10,
            "data": {"n_clients": 4, "samples_per_client": 50},
            "convergence": {"enabled": False},
            "trigger": {
                "enabled": True,
                "threshold": 0.7,
                "patience": 2,
                "n_monitored": 4,
                "monitor_rounds": 6,
                "drift_after": 1,
                "max_replacements": 1,
            },
        }
    )
    r = run_scenario(s)
    events = [m.event for m in r.metrics]
    assert events.count("replaced") == 1 == r.summary["replacements"]
    i = events.index("replaced")
    assert events[i + 1] == "task_created"
    checks = [m.extra for m in r.metrics[:i] if m.event == "trigger_check"]
    assert checks[-1]["fired"] and checks[-1]["consecutive_breaches"] >= 2
    assert LifecycleState.REPLACED in r.lifecycle
    assert r.summary["global_records"] == 20


def test_balancing_reports_even_histograms():
    s = validate_scenario(
        {
            "seed": 5,
            "rounds": 1,
            "data": {"n_clients": 2, "class_proportions": [[0.9, 0.1], [0.8, 0.2]]},
            "balance": {"enabled": True},
        }
    )
    r = run_scenario(s)
    for data in r.client_data.values():
        hist = data.class_histogram
        assert hist[0] == hist[1]


def test_incentive_rewards_sum_to_budget_each_round():
    s = _scenario(rounds=3, incentive={"enabled": True, "scheme": "shapley", "budget": 10.0})
    r = run_scenario(s)
    per_round = {}
    for m in r.metrics:
        if m.event == "reward":
            per_round[m.round] = per_round.get(m.round, 0.0) + m.extra["reward"]
    assert len(per_round) == 3
    assert all(abs(v - 10.0) <= 1e-9 for v in per_round.values())
    assert r.summary["chain_records"] == r.summary["global_records"] + 3
