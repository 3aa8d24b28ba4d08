import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from fedsim.cli import EXIT_OK, EXIT_PARSE, EXIT_RUNTIME, EXIT_VALIDATION, main
from fedsim.simulator import MetricsStream, summarize

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"

SMALL = {
    "name": "small",
    "seed": 4,
    "rounds": 3,
    "data": {"n_clients": 2, "samples_per_client": 40},
    "convergence": {"enabled": False},
}


def _write(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc, encoding="utf-8")
    return str(p)


def _run(tmp_path, doc, out="run", *extra):
    out_dir = tmp_path / out
    code = main(["run", "--scenario", _write(tmp_path, doc, f"{out}.json"), "--out", str(out_dir), *extra])
    return code, out_dir


def _sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---- run ------------------------------------------------------------------


def test_run_writes_three_files(tmp_path, capsys):
    code, out = _run(tmp_path, SMALL)
    assert code == EXIT_OK
    assert sorted(p.name for p in out.iterdir()) == ["coversion.log", "metrics.jsonl", "summary.json"]
    assert "3 rounds" in capsys.readouterr().out


def test_malformed_scenario_exits_1_without_outputs(tmp_path, capsys):
    code, out = _run(tmp_path, '{"rounds": 3,')
    assert code == EXIT_PARSE
    assert not out.exists()
    assert "parse error" in capsys.readouterr().err


def test_invalid_scenario_exits_2_listing_paths(tmp_path, capsys):
    code, out = _run(tmp_path, {**SMALL, "data": {"n_clients": 2, "skew": -1}, "bogus": 1})
    assert code == EXIT_VALIDATION
    assert not out.exists()
    err = capsys.readouterr().err
    assert "data.skew" in err and "bogus" in err


def test_missing_scenario_file_is_parse_error(tmp_path):
    assert main(["run", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == EXIT_PARSE


def test_runtime_failure_exits_3_without_outputs(tmp_path, capsys):
    # a value this large cannot be encoded in the secure fixed-point ring
    doc = {**SMALL, "aggregator": {"kind": "secure"}, "training": {"learning_rate": 1e9}}
    code, out = _run(tmp_path, doc)
    assert code == EXIT_RUNTIME
    assert not out.exists()
    assert "run aborted" in capsys.readouterr().err


def test_reruns_are_byte_identical(tmp_path):
    _, a = _run(tmp_path, SMALL, "a")
    _, b = _run(tmp_path, SMALL, "b")
    for name in ("metrics.jsonl", "coversion.log", "summary.json"):
        assert _sha(a / name) == _sha(b / name)


def test_seed_override(tmp_path):
    _, a = _run(tmp_path, SMALL, "a", "--seed", "99")
    _, b = _run(tmp_path, {**SMALL, "seed": 99}, "b")
    _, c = _run(tmp_path, SMALL, "c")
    assert _sha(a / "metrics.jsonl") == _sha(b / "metrics.jsonl") != _sha(c / "metrics.jsonl")
    assert json.loads((a / "summary.json").read_text())["seed"] == 99


def test_summary_is_fold_over_metrics(tmp_path):
    _, out = _run(tmp_path, {**SMALL, "devices": {"dropout_prob": 0.3}, "rounds": 6})
    lines = (out / "metrics.jsonl").read_text().splitlines()
    records = [json.loads(line) for line in lines]
    assert records == MetricsStream.parse("\n".join(lines))
    summary = json.loads((out / "summary.json").read_text())
    for key, value in summarize(records).items():
        assert summary[key] == value
    assert summary["total_bytes_up"] == sum(r["bytes_up"] for r in records)


def test_usage_error_exits_1(capsys):
    with pytest.raises(SystemExit) as info:
        main(["run", "--scenario"])
    assert info.value.code == EXIT_PARSE


def test_validate_command(tmp_path, capsys):
    assert main(["validate", "--scenario", _write(tmp_path, SMALL)]) == EXIT_OK
    assert main(["validate", "--scenario", _write(tmp_path, {"rounds": "x"}, "bad.json")]) == EXIT_VALIDATION


@pytest.mark.parametrize("path", sorted(SCENARIOS.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_scenarios_validate(path):
    assert main(["validate", "--scenario", str(path)]) == EXIT_OK


# ---- compare --------------------------------------------------------------


def _table(capsys, *dirs):
    assert main(["compare", "--runs", *map(str, dirs), "--json"]) == EXIT_OK
    return json.loads(capsys.readouterr().out)


def test_compare_with_itself_has_zero_deltas(tmp_path, capsys):
    _, a = _run(tmp_path, SMALL)
    capsys.readouterr()
    table = _table(capsys, a, a)
    for f, cols in table["fields"].items():
        assert all(d in (0, None) for d in cols["delta_vs_first"]), f


def test_compare_keeps_argument_order(tmp_path, capsys):
    dirs = [_run(tmp_path, {**SMALL, "seed": s}, f"r{s}")[1] for s in (3, 1, 2)]
    capsys.readouterr()
    assert _table(capsys, *dirs)["runs"] == [str(d) for d in dirs]


def test_compare_shows_compression_savings(tmp_path, capsys):
    wide = {**SMALL, "data": {"n_clients": 2, "samples_per_client": 40, "n_features": 49}}
    _, dense = _run(tmp_path, wide, "dense")
    _, sparse = _run(tmp_path, {**wide, "compression": {"scheme": "topk", "k_fraction": 0.1}}, "sparse")
    capsys.readouterr()
    row = _table(capsys, dense, sparse)["fields"]["total_bytes_up"]
    assert row["values"][1] < row["values"][0] and row["delta_vs_first"][1] < 0
    assert main(["compare", "--runs", str(dense), str(sparse)]) == EXIT_OK
    text = capsys.readouterr().out
    assert "total_bytes_up" in text and "delta" in text


def test_compare_missing_summary_exits_2(tmp_path, capsys):
    _, a = _run(tmp_path, SMALL)
    (tmp_path / "empty").mkdir()
    assert main(["compare", "--runs", str(a), str(tmp_path / "empty")]) == EXIT_VALIDATION
    assert main(["compare", "--runs", str(a)]) == EXIT_VALIDATION


# ---- lineage --------------------------------------------------------------


def test_lineage_lists_contributors(tmp_path, capsys):
    _, out = _run(tmp_path, SMALL)
    capsys.readouterr()
    assert main(["lineage", "--out", str(out), "--version", "1"]) == EXIT_OK
    rows = [line.split("\t") for line in capsys.readouterr().out.splitlines()[1:]]
    assert [(c, v) for c, v, _ in rows] == [("c000", "1"), ("c001", "1")]
    assert all(len(d) == 64 for _, _, d in rows)
    assert main(["lineage", "--out", str(out), "--version", "2", "--json"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["global_version"] == 2 and len(doc["contributors"]) == 2


def test_lineage_version_zero_and_unknown(tmp_path, capsys):
    _, out = _run(tmp_path, SMALL)
    capsys.readouterr()
    assert main(["lineage", "--out", str(out), "--version", "0"]) == EXIT_OK
    assert "no contributors" in capsys.readouterr().out
    assert main(["lineage", "--out", str(out), "--version", "42"]) == EXIT_VALIDATION
    assert "version not found: 42" in capsys.readouterr().err


def test_lineage_tampered_log_exits_3(tmp_path, capsys):
    _, out = _run(tmp_path, SMALL)
    log = out / "coversion.log"
    blob = bytearray(log.read_bytes())
    blob[len(blob) // 2] ^= 0x10
    log.write_bytes(bytes(blob))
    capsys.readouterr()
    assert main(["lineage", "--out", str(out), "--version", "1"]) == EXIT_RUNTIME
    assert "record" in capsys.readouterr().err


def test_lineage_missing_log_exits_2(tmp_path):
    assert main(["lineage", "--out", str(tmp_path), "--version", "1"]) == EXIT_VALIDATION


# ---- process level --------------------------------------------------------


def _cli(*args, env=None):
    return subprocess.run([sys.executable, "-m", "fedsim.cli", *args], capture_output=True, text=True, env=env)


def test_console_module_exit_codes(tmp_path):
    good = _write(tmp_path, SMALL)
    assert _cli("run", "--scenario", good, "--out", str(tmp_path / "o")).returncode == EXIT_OK
    assert _cli("run", "--scenario", _write(tmp_path, "[", "b.json"), "--out", str(tmp_path / "p")).returncode == EXIT_PARSE
    assert not (tmp_path / "p").exists()


def test_fedsim_log_levels(tmp_path):
    import os

    good = _write(tmp_path, SMALL)
    quiet = _cli("run", "--scenario", good, "--out", str(tmp_path / "q"), env={**os.environ, "FEDSIM_LOG": "error"})
    loud = _cli("run", "--scenario", good, "--out", str(tmp_path / "l"), env={**os.environ, "FEDSIM_LOG": "debug"})
    odd = _cli("validate", "--scenario", good, env={**os.environ, "FEDSIM_LOG": "chatty"})
    assert quiet.stderr == ""
    assert "DEBUG" in loud.stderr and "INFO" in loud.stderr
    assert odd.returncode == EXIT_OK and "FEDSIM_LOG" in odd.stderr
