import io
import json
import shutil
import subprocess
import sys
import threading

import pytest

from accessnet.cli import ENDPOINT_ENV, STORE_ENV, dispatch
from accessnet.model import Policy
from accessnet.orchestrator import NorthboundApi, Orchestrator, make_http_server
from accessnet.simnet import builders

KEY = "00" * 16


def cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    code = dispatch(list(argv), out, err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def store(tmp_path, monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    path = tmp_path / "store.json"
    monkeypatch.setenv(STORE_ENV, str(path))
    basic = tmp_path / "basic.json"
    basic.write_text(json.dumps({"id": "basic", "phases": [{"rate_limit_bps": 0}]}))
    assert cli("policy", "set", str(basic)) == (0, "generation 1\n", "")
    return path


def test_subscriber_add_prints_generation(store):
    code, out, _ = cli("subscriber", "add", "--id", "001010000000001", "--key", KEY, "--policy", "basic")
    assert code == 0 and out.strip() == "generation 2"
    code, out, _ = cli("subscriber", "list")
    assert "001010000000001" in out and "policy=basic" in out


def test_duplicate_and_unknown_policy_exit_1(store):
    args = ("subscriber", "add", "--id", "001010000000001", "--key", KEY, "--policy", "basic")
    cli(*args)
    code, _, err = cli(*args)
    assert code == 1 and "error" in err
    code, _, err = cli("subscriber", "add", "--id", "001010000000002", "--key", KEY, "--policy", "ghost")
    assert code == 1 and "unknown policy" in err


def test_policy_set_and_list(store, tmp_path):
    good = tmp_path / "gold.json"
    good.write_text(json.dumps({"id": "gold", "phases": [{"rate_limit_bps": 10_000_000, "byte_threshold": 1000},
                                                         {"rate_limit_bps": 1_000_000}]}))
    assert cli("policy", "set", str(good))[0] == 0
    code, out, _ = cli("policy", "list")
    assert "gold: 10000000bps until 1000B -> 1000000bps" in out


def test_policy_set_bad_file_exits_1(store, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"id": "bad", "phases": []}))
    before = cli("--json", "policy", "list")[1]
    code, _, err = cli("policy", "set", str(bad))
    assert code == 1 and "phases" in err
    assert cli("--json", "policy", "list")[1] == before
    assert cli("policy", "set", str(tmp_path / "missing.json"))[0] == 1


def test_unknown_subscriber_rm(store):
    code, out, _ = cli("--json", "subscriber", "rm", "001019999999999")
    assert code == 1 and "error" in json.loads(out)


def test_json_output_round_trips(store):
    cli("subscriber", "add", "--id", "001010000000001", "--key", KEY, "--policy", "basic", "--tech", "wifi_like")
    code, out, _ = cli("--json", "subscriber", "list")
    rows = json.loads(out)["subscribers"]
    assert code == 0 and rows[0]["allowed_technologies"] == ["wifi_like"]
    assert json.loads(cli("--json", "agw", "list")[1]) == {"agws": []}


@pytest.mark.parametrize("argv", [["frobnicate"], ["subscriber"], ["subscriber", "add", "--id", "x"], []])
def test_usage_errors_exit_2(store, argv):
    assert cli(*argv)[0] == 2


def test_run_writes_report(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    sc = tmp_path / "storm.json"
    sc.write_text(json.dumps(builders.overload(1.0, arrivals_ms=10_000)))
    code, out, _ = cli("--json", "run", str(sc), "--seed", "7", "--out", "r1")
    payload = json.loads(out)
    assert code == 0 and payload["csr"] == 1.0
    lines = (tmp_path / "r1" / "metrics.jsonl").read_text().splitlines()
    assert lines and all(json.loads(line)["name"] for line in lines)
    code, out, _ = cli("report", "summarize", "r1")
    assert code == 0 and "csr=1.0" in out
    code, out, _ = cli("--json", "metrics", "get", "--report", "r1", "--name", "cp_busy_ms")
    assert {m["name"] for m in json.loads(out)["metrics"]} == {"cp_busy_ms"}
    # same seed, same bytes
    cli("run", str(sc), "--seed", "7", "--out", "r2")
    assert (tmp_path / "r1" / "trace.jsonl").read_bytes() == (tmp_path / "r2" / "trace.jsonl").read_bytes()


def test_run_rejects_bad_scenario(tmp_path):
    sc = tmp_path / "bad.json"
    sc.write_text(json.dumps({"duration_ms": 10, "network": {"agws": [], "ran_elements": [
        {"ran_element_id": "e", "technology": "lte_like", "agw_id": "nope"}]}}))
    code, _, err = cli("run", str(sc), "--out", str(tmp_path / "o"))
    assert code == 1 and "unknown agw" in err


def test_http_backend(monkeypatch, tmp_path):
    orch = Orchestrator(path=tmp_path / "srv.json")
    orch.upsert_policy(Policy.flat("basic", 0))
    api = NorthboundApi(orch)
    server = make_http_server(api)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    try:
        monkeypatch.setenv(ENDPOINT_ENV, f"http://127.0.0.1:{server.server_address[1]}")
        code, out, _ = cli("subscriber", "add", "--id", "001010000000001", "--key", KEY, "--policy", "basic")
        assert code == 0 and out.strip() == "generation 2"
        assert "001010000000001" in api.orch.store.subscribers
        assert cli("subscriber", "add", "--id", "001010000000001", "--key", KEY, "--policy", "basic")[0] == 1
    finally:
        server.shutdown()
        server.server_close()
    monkeypatch.setenv(ENDPOINT_ENV, f"http://127.0.0.1:{server.server_address[1]}")
    code, _, err = cli("subscriber", "list")
    assert code == 1 and "cannot reach" in err


def test_console_script_exit_codes(tmp_path):
    exe = shutil.which("accessnet")
    cmd = [exe] if exe else [sys.executable, "-m", "accessnet"]
    env = {"PATH": "/usr/bin:/bin", STORE_ENV: str(tmp_path / "s.json")}
    assert subprocess.run(cmd + ["nonsense"], capture_output=True, env=env).returncode == 2
    ok = subprocess.run(cmd + ["policy", "list"], capture_output=True, env=env, text=True)
    assert ok.returncode == 0 and ok.stdout.strip() == "(no policies)"
