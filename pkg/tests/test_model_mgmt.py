import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedsim.client_mgmt import ClusterAssignment
from fedsim.core import EvalReport, ParamVector
from fedsim.errors import (
    ChainIntegrityError,
    ConfigurationError,
    DecodeError,
    DeploymentError,
    MonitoringError,
    NotFoundError,
    ParameterError,
)
from fedsim.model_mgmt import (
    GENESIS_DIGEST,
    CoVersionRegistry,
    HashChainLog,
    TriggerState,
    check_replacement_trigger,
    compress,
    decompress,
    nearest_cluster,
    quantization_bound,
    query_lineage,
    record_co_version,
    select_deployment,
    verify_chain,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


# ---- compression ----------------------------------------------------------


@given(st.lists(finite, min_size=1, max_size=64))
@settings(max_examples=80, deadline=None)
def test_none_roundtrip_byte_exact(values):
    v = ParamVector(np.array(values))
    c = compress(v, "none")
    assert decompress(c).to_bytes() == v.to_bytes()
    assert c.compressed_bytes == len(c.payload) == 5 + 8 * v.dim


@given(st.lists(finite, min_size=1, max_size=64))
@settings(max_examples=80, deadline=None)
def test_topk_full_k_is_identity(values):
    v = ParamVector(np.array(values))
    assert decompress(compress(v, "topk", k=v.dim)) == v


def test_topk_single_dominant_coordinate():
    out = decompress(compress(ParamVector(np.array([0.1, -5.0, 2.0])), "topk", k=1))
    assert out.values.tolist() == [0.0, -5.0, 0.0]


@given(st.lists(finite, min_size=2, max_size=50, unique=True), st.data())
@settings(max_examples=80, deadline=None)
def test_topk_preserves_largest_magnitudes(values, data):
    v = np.array(values)
    k = data.draw(st.integers(1, v.size))
    out = decompress(compress(ParamVector(v), "topk", k=k)).values
    kept = np.flatnonzero(out)
    mags = np.sort(np.abs(v))[::-1]
    assert np.sort(np.abs(out[kept]))[::-1].tolist() == mags[: kept.size].tolist()
    assert np.array_equal(out[kept], v[kept])


def test_topk_wire_layout():
    v = ParamVector(np.array([0.0, 3.0, -1.0, 7.0]))
    c = compress(v, "topk", k=2)
    expected = struct.pack("<BI", 1, 4) + struct.pack("<I", 2) + struct.pack("<Hd", 1, 3.0) + struct.pack("<Hd", 3, 7.0)
    assert c.payload == expected


def test_quantize_wire_layout():
    v = ParamVector(np.array([0.0, 1.0, 0.5]))
    c = compress(v, "quantize", bits=8)
    step = 1.0 / 255
    head = struct.pack("<BI", 2, 3) + struct.pack("<Bdd", 8, 0.0, step)
    assert c.payload == head + bytes([0, 255, round(0.5 / step)])


@pytest.mark.parametrize("bits", [4, 8, 16])
def test_quantize_error_bound_1000_vectors(bits):
    rng = np.random.default_rng(bits)
    for _ in range(1000):
        x = rng.normal(scale=rng.uniform(0.01, 100), size=rng.integers(1, 40))
        out = decompress(compress(ParamVector(x), "quantize", bits=bits)).values
        bound = quantization_bound(x.min(), x.max(), bits)
        slack = 8 * np.finfo(float).eps * max(1.0, np.abs(x).max())
        assert np.max(np.abs(out - x)) <= bound + slack


def test_quantize_constant_vector_exact():
    v = ParamVector(np.full(5, 2.5))
    assert decompress(compress(v, "quantize", bits=4)) == v


def test_compression_shrinks_payload():
    v = ParamVector(np.random.default_rng(0).normal(size=100))
    raw = compress(v, "none").compressed_bytes
    assert compress(v, "topk", k=49).compressed_bytes < raw
    for bits in (4, 8, 16):
        assert compress(v, "quantize", bits=bits).compressed_bytes < raw


def test_large_dim_uses_wide_indices():
    v = ParamVector(np.arange(70_000, dtype=float))
    c = compress(v, "topk", k=3)
    assert c.compressed_bytes == 5 + 4 + 3 * (4 + 8)
    assert decompress(c).values[-3:].tolist() == [69_997.0, 69_998.0, 69_999.0]


def test_parameter_errors():
    v = ParamVector(np.ones(3))
    with pytest.raises(ParameterError):
        compress(v, "topk", k=4)
    with pytest.raises(ParameterError):
        compress(v, "quantize", bits=3)
    with pytest.raises(ParameterError):
        compress(v, "zip")


@pytest.mark.parametrize("scheme,kw", [("none", {}), ("topk", {"k": 2}), ("quantize", {"bits": 4})])
def test_corrupt_payload_is_decode_error(scheme, kw):
    payload = compress(ParamVector(np.arange(5.0)), scheme, **kw).payload
    with pytest.raises(DecodeError):
        decompress(payload[:-1])
    with pytest.raises(DecodeError):
        decompress(b"\x09" + payload[1:])
    with pytest.raises(DecodeError):
        decompress(b"")


def test_topk_out_of_range_index_rejected():
    bad = struct.pack("<BI", 1, 2) + struct.pack("<I", 1) + struct.pack("<Hd", 5, 1.0)
    with pytest.raises(DecodeError):
        decompress(bad)


# ---- co-versioning --------------------------------------------------------


def _digest(s):
    return hashlib.sha256(s.encode()).digest()


def _build(rounds, clients):
    reg = CoVersionRegistry()
    for r in range(1, rounds + 1):
        contrib = [(f"c{i}", r, _digest(f"{r}/{i}")) for i in range(clients)]
        record_co_version(reg, r, contrib, reg.head, _digest(f"model{r}"))
    return reg


def test_counts_scale_with_rounds_and_clients():
    reg = _build(20, 30)
    assert reg.global_record_count == 20
    assert reg.local_entry_count == 600
    reg.verify()


def test_genesis_record_with_no_contributors():
    reg = CoVersionRegistry()
    rec = reg.record(0, [], GENESIS_DIGEST)
    assert len(reg.log) == 1 and rec.parent_global_digest == GENESIS_DIGEST
    assert query_lineage(reg, 0) == []
    reg.verify()


def test_record_digest_covers_parent_and_fields():
    reg = _build(2, 2)
    for rec in reg.log.records():
        assert rec.digest == hashlib.sha256(rec.parent_digest + rec.body).digest()


def test_parent_mismatch_raises():
    reg = _build(3, 2)
    with pytest.raises(ChainIntegrityError):
        reg.record(4, [], _digest("not the head"))


def test_lineage_in_submission_order():
    reg = CoVersionRegistry()
    reg.record(1, [("B", 4, _digest("b")), ("A", 2, _digest("a"))], reg.head)
    assert reg.lineage(1) == [("B", 4), ("A", 2)]


def test_unknown_version_not_found():
    reg = _build(2, 1)
    with pytest.raises(NotFoundError):
        reg.lineage(5)


def _frame_offsets(data):
    offsets, pos = [], 0
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        offsets.append((pos, pos + 4 + n + 64))
        pos += 4 + n + 64
    return offsets


def _first_failure(blob):
    try:
        log = HashChainLog.from_bytes(blob, verify=False)
    except ChainIntegrityError as exc:
        return exc.index
    try:
        HashChainLog.from_bytes(blob, verify=True)
    except ChainIntegrityError as exc:
        return exc.index
    return verify_chain(log.records())


def test_byte_flip_in_record_37_detected_at_37():
    reg = _build(60, 3)
    data = reg.log.to_bytes()
    start, end = _frame_offsets(data)[37]
    for pos in range(start, end):
        for bit in (0x01, 0x80):
            blob = bytearray(data)
            blob[pos] ^= bit
            assert _first_failure(bytes(blob)) == 37, pos


@given(st.integers(0, 10**9), st.integers(0, 7))
@settings(max_examples=200, deadline=None)
def test_any_single_bit_flip_detected(pos_seed, bit):
    data = _build(8, 2).log.to_bytes()
    blob = bytearray(data)
    blob[pos_seed % len(blob)] ^= 1 << bit
    with pytest.raises(ChainIntegrityError):
        HashChainLog.from_bytes(bytes(blob))


def test_save_load_roundtrip(tmp_path):
    reg = _build(5, 4)
    reg.save(tmp_path / "coversion.log")
    again = CoVersionRegistry.load(tmp_path / "coversion.log")
    assert again.versions() == [1, 2, 3, 4, 5]
    assert again.lineage(3) == reg.lineage(3)
    assert again.head == reg.head


# ---- replacement trigger --------------------------------------------------


def _reports(n_bad, n_total, threshold=0.8):
    return {f"c{i}": EvalReport(0.5, threshold - 0.1 if i < n_bad else threshold + 0.1, 10) for i in range(n_total)}


def _run(pattern, patience=3, quorum=0.5):
    s = TriggerState(0.8, patience, quorum)
    for breach in pattern:
        s = check_replacement_trigger(s, _reports(10 if breach else 0, 10), 10)
    return s


def test_three_breaches_fire():
    assert _run([True, True, True]).fired


def test_reset_breaks_the_run():
    assert not _run([True, True, False, True, True]).fired


def test_below_quorum_is_not_a_breach():
    s = check_replacement_trigger(TriggerState(0.8, 1, 0.5), _reports(4, 10), 10)
    assert s.consecutive_breaches == 0 and not s.fired
    s = check_replacement_trigger(TriggerState(0.8, 1, 0.5), _reports(5, 10), 10)
    assert s.fired


def test_empty_reports_raise():
    with pytest.raises(MonitoringError):
        check_replacement_trigger(TriggerState(), {}, 3)


def test_fired_requires_patience():
    with pytest.raises(ConfigurationError):
        TriggerState(patience=3, consecutive_breaches=1, fired=True)


def _oracle(bad_counts, n, patience, quorum):
    run, history = 0, []
    for bad in bad_counts:
        run = run + 1 if bad / n >= quorum else 0
        fired = run >= patience
        history.append((run, fired))
    return history


@given(
    n=st.integers(1, 12),
    patience=st.integers(1, 6),
    quorum=st.floats(0.05, 1.0),
    data=st.data(),
)
@settings(max_examples=200, deadline=None)
def test_trigger_matches_counting_oracle(n, patience, quorum, data):
    bad_counts = data.draw(st.lists(st.integers(0, n), min_size=1, max_size=25))
    s = TriggerState(0.8, patience, quorum)
    for step, (bad, (run, fired)) in enumerate(zip(bad_counts, _oracle(bad_counts, n, patience, quorum))):
        s = check_replacement_trigger(s, _reports(bad, n), n)
        assert (s.consecutive_breaches, s.fired) == (run, fired)
        if step + 1 < patience:
            assert not s.fired


def test_loss_metric_breaches_above_threshold():
    s = TriggerState(1.0, 1, 1.0, metric="loss")
    reports = {"a": EvalReport(2.0, None, 5)}
    assert check_replacement_trigger(s, reports, 1).fired


# ---- deployment -----------------------------------------------------------


def _registry_with(n_models):
    reg = CoVersionRegistry()
    digests = []
    for v in range(1, n_models + 1):
        d = _digest(f"global{v}")
        reg.record(v, [], reg.head, d)
        digests.append(d)
    return reg, digests


def test_each_client_gets_its_cluster_model():
    reg, (d0, d1) = _registry_with(2)
    ca = ClusterAssignment({"a": 0, "b": 1, "c": 0, "d": 1}, 2, "cosine")
    plan = select_deployment(reg, ca, {0: d0, 1: d1})
    assert plan.assignments == {"a": d0, "b": d1, "c": d0, "d": d1}
    assert plan.rationale == ca.assignments


def test_single_cluster_gets_global_model():
    reg, (d,) = _registry_with(1)
    ca = ClusterAssignment({c: 0 for c in "abc"}, 1, "cosine")
    assert set(select_deployment(reg, ca, {0: d}).assignments.values()) == {d}


def test_missing_cluster_model_raises():
    reg, (d,) = _registry_with(1)
    with pytest.raises(DeploymentError):
        select_deployment(reg, ClusterAssignment({"a": 0, "b": 1}, 2, "cosine"), {0: d})


def test_unregistered_digest_raises():
    reg, _ = _registry_with(1)
    with pytest.raises(DeploymentError):
        select_deployment(reg, ClusterAssignment({"a": 0}, 1, "cosine"), {0: _digest("rogue")})


def test_new_user_goes_to_nearest_medoid():
    reg, (d0, d1) = _registry_with(2)
    k = nearest_cluster(np.array([9.0, 1.0]), {0: np.array([1.0, 9.0]), 1: np.array([10.0, 0.0])})
    plan = select_deployment(reg, ClusterAssignment({"a": 0}, 2, "euclidean"), {0: d0, 1: d1}, new_users={"z": k})
    assert plan.assignments["z"] == d1


@given(st.dictionaries(st.text(min_size=1, max_size=4), st.integers(0, 2), min_size=1, max_size=12))
@settings(max_examples=50, deadline=None)
def test_deployment_totality(assignment):
    reg, digests = _registry_with(3)
    plan = select_deployment(reg, ClusterAssignment(assignment, 3, "cosine"), dict(enumerate(digests)))
    assert set(plan.assignments) == set(assignment)
