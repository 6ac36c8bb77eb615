#!/usr/bin/env python3
"""
Tests for the command-line surface: CSV on stdout, manifests and exit codes.
"""

import io
import json
import os
import sys
import tempfile
from contextlib import redirect_stdout

import pandas as pd
import pytest

import attackgen
import cli
import config
import shardsim
import workload
from debug_utils import DebugTracker

SCALED = {
    'shards': 4, 'injection_tps': 80, 'validators': 8, 'clients': 4, 'block_capacity': 20,
    'block_interval_ms': 1000, 'queue_sample_ms': 1000, 'seed': 3, 'workload': {'count': 200},
}


def run(*argv):
    """Run the CLI and return (exit code, stdout CSV as a DataFrame or None)."""
    buffer = io.StringIO()
    with redirect_stdout(buffer):
        code = cli.main(list(argv))
    text = buffer.getvalue()
    return code, (pd.read_csv(io.StringIO(text)) if text.strip() else None)


def write_json(directory, name, data):
    path = os.path.join(directory, name)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(data, handle)
    return path


def test_analyze_affected_probability():
    with tempfile.TemporaryDirectory() as out:
        code, frame = run("--out", out, "analyze", "affected", "--shards", "16,4", "--inputs", "2,3")
        assert code == cli.EXIT_OK
        table = frame.set_index(["shards", "inputs"])["affected_probability"]
        assert table[(16, 2)] == pytest.approx(0.176, abs=1e-3)
        assert table[(4, 3)] == pytest.approx(0.684, abs=1e-3)

        manifest = json.load(open(os.path.join(out, "manifest.json"), encoding="utf-8"))
        assert manifest['command'] == "analyze affected"
        assert manifest['settings']['shards'] == "16,4"


def test_plot_writes_html_and_png():
    with tempfile.TemporaryDirectory() as out:
        code, frame = run("--out", out, "analyze", "affected", "--shards", "2,4,8", "--inputs", "1,2",
                          "--samples", "2000", "--plot")
        assert code == cli.EXIT_OK
        assert {"monte_carlo", "monte_carlo_se"} <= set(frame.columns)
        for name in ("affected.html", "affected.png"):
            assert os.path.getsize(os.path.join(out, name)) > 0


def test_analyze_cost_and_budget():
    with tempfile.TemporaryDirectory() as out:
        code, frame = run("--out", out, "analyze", "cost", "--count", "2500")
        assert code == cli.EXIT_OK
        assert frame.loc[0, 'usd'] == pytest.approx(125.0)
        code, frame = run("--out", out, "analyze", "cost", "--rate", "500", "--seconds", "5")
        assert frame.loc[0, 'usd'] == pytest.approx(125.0)


def test_invalid_shard_count_exits_with_config_error():
    with tempfile.TemporaryDirectory() as out:
        assert run("--out", out, "analyze", "affected", "--shards", "0")[0] == cli.EXIT_CONFIG
        assert run("--out", out, "analyze", "attempts", "--shards", "-2")[0] == cli.EXIT_CONFIG


def test_bad_config_exits_with_config_error():
    with tempfile.TemporaryDirectory() as out:
        unknown = write_json(out, "unknown.json", dict(SCALED, warp_speed=9))
        invalid = write_json(out, "invalid.json", dict(SCALED, malicious_fraction=1.5))
        assert run("--out", out, "simulate", "--config", unknown)[0] == cli.EXIT_CONFIG
        assert run("--out", out, "simulate", "--config", invalid)[0] == cli.EXIT_CONFIG
        assert run("--out", out, "simulate", "--config", os.path.join(out, "missing.json"))[0] == cli.EXIT_CONFIG
        assert run("--out", out, "analyze", "fit")[0] == cli.EXIT_CONFIG


def test_malformed_list_options_exit_with_config_error():
    with tempfile.TemporaryDirectory() as out:
        assert run("--out", out, "analyze", "affected", "--shards", "a,b")[0] == cli.EXIT_CONFIG
        assert run("--out", out, "analyze", "affected", "--inputs", "3-1")[0] == cli.EXIT_CONFIG
        assert run("--out", out, "experiment", "throughput", "--fractions", "0,1.5")[0] == cli.EXIT_CONFIG


def test_runtime_errors_exit_with_failure():
    def out_of_funds(cfgs, workers=1):
        raise attackgen.InsufficientFundsError("attacker ran out of outputs")

    original = shardsim.run_experiments
    shardsim.run_experiments = out_of_funds
    try:
        with tempfile.TemporaryDirectory() as out:
            path = write_json(out, "scaled.json", SCALED)
            assert run("--out", out, "simulate", "--config", path)[0] == cli.EXIT_FAILURE
    finally:
        shardsim.run_experiments = original


def test_bit_order_flag_reaches_config():
    args = cli.build_parser().parse_args(["simulate", "--bit-order", "little", "--sharder", "tee-attested"])
    cfg = cli.build_config(args)
    assert cfg.bit_order == "little" and cfg.sharder == "tee-attested"
    assert cli.build_config(cli.build_parser().parse_args(["simulate"])).bit_order == "big"

    with tempfile.TemporaryDirectory() as out:
        dataset = os.path.join(out, "little.txt")
        code, _ = run("--out", out, "gen-workload", "--shards", "4", "--count", "50", "--bit-order", "little",
                      "-o", dataset)
        assert code == cli.EXIT_OK
        manifest = json.load(open(os.path.join(out, "manifest.json"), encoding="utf-8"))
        assert manifest['settings']['bit_order'] == "little"


def test_gen_workload_writes_dataset():
    with tempfile.TemporaryDirectory() as out:
        dataset = os.path.join(out, "synthetic.txt")
        code, _ = run("--out", out, "gen-workload", "--shards", "4", "--count", "300", "--seed", "2",
                      "-o", dataset)
        assert code == cli.EXIT_OK
        records = list(workload.load_dataset(dataset))
        assert sum(not tx.genesis for tx in records) == 300

        code, frame = run("--out", out, "analyze", "empirical", "--dataset", dataset, "--shards", "4")
        assert code == cli.EXIT_OK
        assert 0.25 <= frame.loc[0, 'affected_fraction'] <= 1.0


def test_simulate_writes_csvs_and_manifest():
    with tempfile.TemporaryDirectory() as out:
        path = write_json(out, "scaled.json", SCALED)
        code, frame = run("--out", out, "simulate", "--config", path, "--malicious-fraction", "0.2")
        assert code == cli.EXIT_OK
        assert frame.loc[0, 'malicious_fraction'] == pytest.approx(0.2)
        assert frame.loc[0, 'throughput_tps'] > 0
        for name in ("throughput.csv", "latency.csv", "queue_0.csv", "manifest.json"):
            assert os.path.exists(os.path.join(out, name))
        manifest = json.load(open(os.path.join(out, "manifest.json"), encoding="utf-8"))
        assert manifest['seeds'] == [3]
        assert manifest['settings']['malicious_fraction'] == 0.2


def test_countermeasure_demo_exit_codes():
    with tempfile.TemporaryDirectory() as out:
        code, frame = run("--out", out, "countermeasure-demo", "--txs", "40", "--seed", "1")
        assert code == cli.EXIT_OK
        assert bool(frame.loc[0, 'sound'])
        assert os.path.exists(os.path.join(out, "transcript.csv"))

        code, _ = run("--out", out, "countermeasure-demo", "--adversary", "tamper-sout", "--txs", "60",
                      "--seed", "2")
        assert code == cli.EXIT_VERIFICATION


def test_debug_report_collects_runs_and_timings():
    tracker = DebugTracker(debug_level=config.DEBUG_LEVELS['DETAILED'])
    tracker.track_run("unit", {'shards': 4, 'malicious_fraction': 0.1}, {'throughput_tps': 12.5})
    tracker.track_enclave_call("placement", "resume", 1.5, 120, ok=False)
    tracker.record_timing("grind", 0.5)
    tracker.record_timing("grind", 1.5)
    report = tracker.report()
    assert report['enclave_calls'] == {'recorded': 1, 'failed': 1}
    assert report['timings']['grind'] == {'calls': 2, 'total_s': 2.0, 'max_s': 1.5}
    quiet = DebugTracker(debug_level=config.DEBUG_LEVELS['MINIMAL'])
    quiet.track_enclave_call("placement", "resume", 1.0)
    assert quiet.enclave_calls == [] and quiet.notes == []

    with tempfile.TemporaryDirectory() as out:
        path = os.path.join(out, "debug.json")
        code, _ = run("--out", out, "--debug-report", path, "attack-bench", "--shards", "2", "--seconds", "0.1")
        assert code == cli.EXIT_OK
        written = json.load(open(path, encoding="utf-8"))
        assert any(name.endswith("bench_generation") for name in written['timings'])


def main():
    tests = [(name, func) for name, func in globals().items() if name.startswith("test_") and callable(func)]
    print("🧪 Testing command line...")
    failed = 0
    for name, func in tests:
        try:
            func()
            print(f"✅ {name}")
        except Exception as e:
            failed += 1
            print(f"❌ {name}: {str(e)}")
    print(f"\n{len(tests) - failed}/{len(tests)} passed")
    return failed == 0


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
