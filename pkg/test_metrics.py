#!/usr/bin/env python3
"""
Tests for run metrics and their CSV/Excel outputs.
"""

import os
import sys
import tempfile

import pandas as pd
import pytest

from metrics import (LATENCY_COLUMNS, PARAM_COLUMNS, QUEUE_COLUMNS, THROUGHPUT_COLUMNS, MetricsCollector,
                     MetricsReport, export_to_excel, latency_frame, queue_frame, throughput_frame, write_csvs)


def collected():
    collector = MetricsCollector(2)
    collector.on_submit(1000, False, affected=True)
    collector.on_submit(2000, False)
    collector.on_submit(2500, True)
    collector.on_submit(3000, False)
    collector.sample_queues(0, [0, 0])
    collector.sample_queues(0, [9, 9])
    collector.sample_queues(5000, [3, 1])
    collector.on_commit(5000, 1000, False)
    collector.on_commit(6000, 2000, False)
    collector.on_commit(6000, 2500, True)
    collector.on_reject(4000, False, "double-spend")
    return collector


def params(run=0, fraction=0.0):
    return {'run': run, 'shards': 2, 'injection_tps': 10, 'malicious_fraction': fraction,
            'sharder': 'hash', 'seed': 1}


def test_collector_totals_and_rates():
    report = collected().finalize(7000)
    assert report.submitted_count == 4 and report.malicious_submitted == 1
    assert report.committed_count == 2 and report.malicious_committed == 1
    assert report.affected_count == 1
    assert report.duration_s == 5.0
    assert report.throughput_tps == pytest.approx(0.4)
    assert report.avg_latency_ms == 4000.0
    assert report.p50_latency_ms == 4000.0
    assert report.conserved
    assert dict(report.rejection_reasons) == {"double-spend": 1}


def test_queue_samples_ignore_repeated_timestamps():
    report = collected().finalize(7000)
    assert report.queue_series[0] == ((0, 0), (5000, 3))
    assert report.max_queue(0) == 3
    assert report.max_queue(5) == 0
    frame = report.queue_frame(1)
    assert list(frame.columns) == QUEUE_COLUMNS
    assert frame['time_s'].tolist() == [0.0, 5.0]


def test_empty_run_reports_zeros():
    report = MetricsCollector(1).finalize(0)
    assert report.throughput_tps == 0.0 and report.avg_latency_ms == 0.0
    assert report.conserved


def test_unbalanced_accounting_is_flagged():
    collector = MetricsCollector(1)
    collector.on_submit(0, False)
    report = collector.finalize(10, pending_count=0)
    assert not report.conserved
    assert MetricsReport(submitted_count=1, pending_count=1).conserved


def test_frames_follow_column_layout():
    runs = [(params(0, 0.0), collected().finalize(7000)), (params(1, 0.5), collected().finalize(7000))]
    throughput = throughput_frame(runs)
    latency = latency_frame(runs)
    queue = queue_frame(runs, 0)
    assert list(throughput.columns) == PARAM_COLUMNS + THROUGHPUT_COLUMNS
    assert list(latency.columns) == PARAM_COLUMNS + LATENCY_COLUMNS
    assert list(queue.columns) == PARAM_COLUMNS + QUEUE_COLUMNS
    assert throughput['malicious_fraction'].tolist() == [0.0, 0.5]
    assert len(queue) == 4
    assert list(queue_frame([], 0).columns) == PARAM_COLUMNS + QUEUE_COLUMNS


def test_write_csvs_and_excel():
    runs = [(params(), collected().finalize(7000))]
    with tempfile.TemporaryDirectory() as out_dir:
        paths = write_csvs(runs, out_dir)
        assert sorted(os.path.basename(p) for p in paths) == [
            "latency.csv", "queue_0.csv", "queue_1.csv", "throughput.csv"]
        df = pd.read_csv(os.path.join(out_dir, "throughput.csv"))
        assert df.loc[0, 'committed_count'] == 2

        workbook = os.path.join(out_dir, "runs.xlsx")
        assert "successfully" in export_to_excel(runs, workbook)
        sheets = pd.read_excel(workbook, sheet_name=None)
        assert set(sheets) == {"Throughput", "Latency", "Queue 0"}


def main():
    tests = [(name, func) for name, func in globals().items() if name.startswith("test_") and callable(func)]
    print("🧪 Testing metrics...")
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
