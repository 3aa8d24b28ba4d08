import itertools
import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from fedsim.client_mgmt import (
    ClientRecord,
    ClientRegistry,
    SelectionCriteria,
    cluster_clients,
    heterogeneity,
    pairwise_distances,
    register_client,
    select_clients,
)
from fedsim.core import ParamVector
from fedsim.errors import ConfigurationError, NotFoundError, RegistryConflictError, ShapeError


def _registry(n=5, **kw):
    return ClientRegistry(ClientRecord(f"c{i:02d}", compute_capacity=1.0 + i, bandwidth=10.0, **kw) for i in range(n))


# ---- registry -------------------------------------------------------------


def test_register_two_clients():
    reg = ClientRegistry()
    register_client(reg, ClientRecord("A"))
    register_client(reg, ClientRecord("B"))
    assert len(reg) == 2


def test_register_is_idempotent():
    reg = ClientRegistry()
    register_client(reg, ClientRecord("A", compute_capacity=2.0))
    register_client(reg, ClientRecord("A", compute_capacity=2.0))
    assert len(reg) == 1


def test_conflicting_immutable_fields_raise():
    reg = ClientRegistry([ClientRecord("A", compute_capacity=2.0)])
    with pytest.raises(RegistryConflictError):
        reg.register(ClientRecord("A", compute_capacity=3.0))


def test_hundred_clients_all_retrievable():
    reg = ClientRegistry()
    for i in range(100):
        reg.register(ClientRecord(f"client-{i}", n_samples=i))
    for i in range(100):
        assert reg.get(f"client-{i}").n_samples == i
    with pytest.raises(NotFoundError):
        reg.get("client-100")


def test_record_invariants():
    with pytest.raises(ConfigurationError):
        ClientRecord("A", connect_time=10.0, disconnect_time=5.0)
    with pytest.raises(ConfigurationError):
        ClientRecord("A", perf_history=((2, 0.1), (2, 0.2)))


def test_performance_history_strictly_increasing():
    reg = ClientRegistry([ClientRecord("A")])
    reg.record_performance("A", 1, 0.5)
    reg.record_performance("A", 3, 0.4)
    with pytest.raises(ConfigurationError):
        reg.record_performance("A", 3, 0.3)


def test_json_roundtrip_is_stable():
    reg = _registry(4, class_histogram={0: 3, 1: 5}, n_samples=8)
    reg.record_performance("c01", 1, 0.25)
    text = reg.to_json()
    again = ClientRegistry.from_json(text)
    assert again.to_json() == text
    doc = json.loads(text)
    assert [r["client_id"] for r in doc["clients"]] == sorted(reg.ids())
    assert list(doc["clients"][0]) == sorted(doc["clients"][0])


def test_concurrent_writers_do_not_tear_records():
    reg = ClientRegistry([ClientRecord(f"c{i}") for i in range(8)])

    def work(i):
        for r in range(1, 200):
            reg.record_performance(f"c{i}", r, 1.0 / r)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for rec in reg.snapshot():
        rounds = [r for r, _ in rec.perf_history]
        assert rounds == list(range(1, 200))


# ---- selection ------------------------------------------------------------


def test_all_offline_gives_empty_selection():
    reg = _registry(4, online=False)
    assert select_clients(reg, SelectionCriteria("random", 3), 1, 0) == []


def test_resource_threshold_filter():
    reg = ClientRegistry(ClientRecord(f"c{c}", compute_capacity=c) for c in (3, 7, 9))
    out = select_clients(reg, SelectionCriteria("resource", top_k=10, min_compute=5), 1, 0)
    assert sorted(out) == ["c7", "c9"]


def test_performance_mode_picks_argmin_last_loss():
    losses = {"a": [0.1, 0.9], "b": [0.8, 0.2], "c": [0.3, 0.5]}
    reg = ClientRegistry()
    for cid, hist in losses.items():
        reg.register(ClientRecord(cid, perf_history=tuple((i + 1, l) for i, l in enumerate(hist))))
    oracle = min(losses, key=lambda c: losses[c][-1])
    assert select_clients(reg, SelectionCriteria("performance", top_k=1), 3, 0) == [oracle] == ["b"]


def test_resource_mode_ranks_capacity_times_bandwidth():
    reg = ClientRegistry(
        [ClientRecord("a", 2, 10), ClientRecord("b", 5, 3), ClientRecord("c", 1, 30), ClientRecord("d", 4, 4)]
    )
    # products: a=20, b=15, c=30, d=16
    assert select_clients(reg, SelectionCriteria("resource", top_k=3), 1, 0) == ["c", "a", "d"]


def test_data_mode_heterogeneity_cap_and_ranking():
    reg = ClientRegistry(
        [
            ClientRecord("a", n_samples=100, class_histogram={0: 95, 1: 5}),
            ClientRecord("b", n_samples=60, class_histogram={0: 30, 1: 30}),
            ClientRecord("c", n_samples=80, class_histogram={0: 50, 1: 30}),
        ]
    )
    assert heterogeneity({0: 95, 1: 5}) == pytest.approx(0.9)
    out = select_clients(reg, SelectionCriteria("data", top_k=3, max_heterogeneity=0.5), 1, 0)
    assert out == ["c", "b"]


def test_cdw_ranks_by_centroid_distance():
    reg = ClientRegistry([ClientRecord(c, centroid_distance=d) for c, d in (("a", 0.5), ("b", 2.0), ("c", 1.0))])
    assert select_clients(reg, SelectionCriteria("cdw", top_k=2), 1, 0) == ["b", "c"]


def test_ties_break_on_client_id():
    reg = ClientRegistry([ClientRecord(c, 1.0, 1.0) for c in ("z", "m", "a")])
    assert select_clients(reg, SelectionCriteria("resource", top_k=2), 1, 0) == ["a", "m"]


@given(
    online=st.lists(st.booleans(), min_size=1, max_size=20),
    mode=st.sampled_from(["resource", "data", "performance", "random", "cdw"]),
    k=st.integers(1, 25),
    round=st.integers(0, 1000),
)
@settings(max_examples=60, deadline=None)
def test_selection_subset_property(online, mode, k, round):
    reg = ClientRegistry(ClientRecord(f"c{i:02d}", online=o, n_samples=i + 1) for i, o in enumerate(online))
    out = select_clients(reg, SelectionCriteria(mode, k), round, 3)
    allowed = {r.client_id for r in reg.snapshot() if r.online}
    assert set(out) <= allowed
    assert len(out) == len(set(out)) <= k


def test_random_mode_reproducible_and_round_salted():
    reg = _registry(20)
    crit = SelectionCriteria("random", 5)
    assert select_clients(reg, crit, 4, 9) == select_clients(reg, crit, 4, 9)
    subsets = {tuple(select_clients(reg, crit, r, 9)) for r in range(100)}
    assert len(subsets) > 1


# ---- clustering -----------------------------------------------------------


def _antipodal(n_per=4, dim=6, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=dim)
    ups, truth = {}, {}
    for i in range(2 * n_per):
        sign = 1 if i % 2 == 0 else -1
        cid = f"k{i:02d}"
        ups[cid] = ParamVector(sign * u * rng.uniform(0.5, 2.0) + 0.05 * rng.normal(size=dim))
        truth[cid] = int(sign > 0)
    return ups, truth


def test_antipodal_groups_recovered_exactly():
    ups, truth = _antipodal()
    a = cluster_clients(ups, 2, "cosine")
    ids = sorted(ups)
    assert adjusted_rand_score([truth[c] for c in ids], a.labels(ids)) == 1.0


def test_kmedoids_reaches_brute_force_optimum():
    ups, _ = _antipodal(n_per=3, seed=2)
    ids = sorted(ups)
    D = pairwise_distances(np.vstack([ups[c].values for c in ids]), "cosine")
    best = min(D[:, list(m)].min(axis=1).sum() for m in itertools.combinations(range(len(ids)), 2))
    a = cluster_clients(ups, 2, "cosine")
    med = [ids.index(m) for m in a.medoids]
    assert D[:, med].min(axis=1).sum() == pytest.approx(best, abs=1e-12)


def test_single_cluster():
    ups, _ = _antipodal()
    a = cluster_clients(ups, 1, "euclidean")
    assert set(a.assignments.values()) == {0}


def test_identical_vectors_split_lexicographically():
    ups = {c: ParamVector(np.ones(3)) for c in ("d", "b", "a", "c")}
    a = cluster_clients(ups, 2, "euclidean")
    assert a.assignments == {"a": 0, "b": 0, "c": 1, "d": 1}


def test_fewer_clients_than_clusters():
    with pytest.raises(ConfigurationError):
        cluster_clients({"a": ParamVector(np.ones(2))}, 2)


def test_mixed_dims_rejected():
    with pytest.raises(ShapeError):
        cluster_clients({"a": ParamVector(np.ones(2)), "b": ParamVector(np.ones(3))}, 1)


@given(
    vecs=st.lists(
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=3, max_size=3), min_size=3, max_size=9
    ),
    k=st.integers(1, 3),
    metric=st.sampled_from(["manhattan", "euclidean", "cosine"]),
)
@settings(max_examples=60, deadline=None)
def test_cluster_totality(vecs, k, metric):
    ups = {f"c{i}": ParamVector(np.array(v)) for i, v in enumerate(vecs)}
    a = cluster_clients(ups, k, metric)
    assert set(a.assignments) == set(ups)
    assert all(0 <= v < k for v in a.assignments.values())


@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
@settings(max_examples=40, deadline=None)
def test_cosine_scaling_invariance(seed, scale):
    rng = np.random.default_rng(seed)
    ups = {f"c{i}": ParamVector(rng.normal(size=4)) for i in range(7)}
    scaled = {c: ParamVector(v.values * scale) for c, v in ups.items()}
    assert cluster_clients(ups, 2, "cosine").assignments == cluster_clients(scaled, 2, "cosine").assignments
