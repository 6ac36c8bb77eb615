"""
Throughput, latency and queue-size measurement for simulation runs.

CSV outputs (long format; every file starts with the run parameter columns
run, shards, injection_tps, malicious_fraction, sharder, seed):

    throughput.csv   throughput_tps, committed_count, malicious_committed,
                     submitted_count, rejected_count, pending_count,
                     affected_count, duration_s
    latency.csv      avg_latency_ms, p50_latency_ms, p95_latency_ms, committed_count
    queue_<shard>.csv  time_s, queue_size
"""

import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

import utils

logger = logging.getLogger(__name__)

PARAM_COLUMNS = ["run", "shards", "injection_tps", "malicious_fraction", "sharder", "seed"]
THROUGHPUT_COLUMNS = ["throughput_tps", "committed_count", "malicious_committed", "submitted_count",
                      "rejected_count", "pending_count", "affected_count", "duration_s"]
LATENCY_COLUMNS = ["avg_latency_ms", "p50_latency_ms", "p95_latency_ms", "committed_count"]
QUEUE_COLUMNS = ["time_s", "queue_size"]

QueueSeries = Tuple[Tuple[int, int], ...]
RunResult = Tuple[Dict[str, Any], "MetricsReport"]


@dataclass(frozen=True)
class MetricsReport:
    """
    Immutable result of one run.

    Throughput and latency cover committed workload transactions; attack
    transactions are counted in malicious_submitted / malicious_committed.
    duration_s spans the first submission to the last workload commit, so
    throughput_tps * duration_s == committed_count.
    """

    throughput_tps: float = 0.0
    avg_latency_ms: float = 0.0
    p50_latency_ms: float = 0.0
    p95_latency_ms: float = 0.0
    queue_series: Tuple[QueueSeries, ...] = ()
    affected_count: int = 0
    submitted_count: int = 0
    malicious_submitted: int = 0
    committed_count: int = 0
    malicious_committed: int = 0
    rejected_count: int = 0
    evicted_count: int = 0
    pending_count: int = 0
    duration_s: float = 0.0
    end_ms: int = 0
    rejection_reasons: Tuple[Tuple[str, int], ...] = ()
    ordering_violations: int = 0

    @property
    def conserved(self) -> bool:
        """committed + rejected + pending accounts for every submission."""
        total = self.committed_count + self.malicious_committed + self.rejected_count + self.pending_count
        return total == self.submitted_count

    def max_queue(self, shard: int) -> int:
        series = self.queue_series[shard] if shard < len(self.queue_series) else ()
        return max((size for _, size in series), default=0)

    def queue_frame(self, shard: int) -> pd.DataFrame:
        series = self.queue_series[shard] if shard < len(self.queue_series) else ()
        frame = pd.DataFrame(list(series), columns=["time_ms", "queue_size"])
        frame.insert(0, "time_s", frame.pop("time_ms") / 1000)
        return frame

    def summary(self) -> Dict[str, Any]:
        return {
            'throughput_tps': round(self.throughput_tps, 3),
            'avg_latency_ms': round(self.avg_latency_ms, 3),
            'p50_latency_ms': self.p50_latency_ms,
            'p95_latency_ms': self.p95_latency_ms,
            'committed_count': self.committed_count,
            'malicious_committed': self.malicious_committed,
            'submitted_count': self.submitted_count,
            'rejected_count': self.rejected_count,
            'evicted_count': self.evicted_count,
            'pending_count': self.pending_count,
            'affected_count': self.affected_count,
            'duration_s': round(self.duration_s, 3),
            'max_queue_shard0': self.max_queue(0),
        }


class MetricsCollector:
    """Event-loop side recorder; finalize() freezes it into a MetricsReport."""

    def __init__(self, shard_count: int):
        self.shard_count = shard_count
        self._samples: List[List[Tuple[int, int]]] = [[] for _ in range(shard_count)]
        self._latencies: List[int] = []
        self._reasons: Counter = Counter()
        self.submitted = 0
        self.malicious_submitted = 0
        self.committed = 0
        self.malicious_committed = 0
        self.rejected = 0
        self.evicted = 0
        self.affected = 0
        self.ordering_violations = 0
        self.first_submit_ms: Optional[int] = None
        self.last_commit_ms: Optional[int] = None

    def on_submit(self, time_ms: int, malicious: bool, affected: bool = False) -> None:
        if self.first_submit_ms is None:
            self.first_submit_ms = time_ms
        self.submitted += 1
        if malicious:
            self.malicious_submitted += 1
        elif affected:
            self.affected += 1

    def on_commit(self, time_ms: int, submit_ms: int, malicious: bool) -> None:
        if malicious:
            self.malicious_committed += 1
            return
        self.committed += 1
        self._latencies.append(time_ms - submit_ms)
        self.last_commit_ms = time_ms

    def on_reject(self, time_ms: int, malicious: bool, reason: str) -> None:
        self.rejected += 1
        self._reasons[reason] += 1
        if reason == "evicted":
            self.evicted += 1
        logger.debug(f"Rejected {'malicious' if malicious else 'workload'} tx at {time_ms} ms: {reason}")

    def on_ordering_violation(self) -> None:
        self.ordering_violations += 1

    def sample_queues(self, time_ms: int, sizes: Sequence[int]) -> None:
        """Record one (time, size) point per shard; repeated timestamps are ignored."""
        for shard, size in enumerate(sizes):
            series = self._samples[shard]
            if series and series[-1][0] >= time_ms:
                continue
            series.append((time_ms, int(size)))

    def finalize(self, end_ms: int, pending_count: int = 0) -> MetricsReport:
        latencies = np.asarray(self._latencies, dtype=np.int64)
        duration_s = 0.0
        throughput = 0.0
        if self.committed and self.first_submit_ms is not None:
            duration_s = (self.last_commit_ms - self.first_submit_ms) / 1000
            throughput = self.committed / duration_s if duration_s > 0 else 0.0
        if latencies.size:
            avg, p50, p95 = (float(latencies.mean()), float(np.percentile(latencies, 50)),
                             float(np.percentile(latencies, 95)))
        else:
            avg = p50 = p95 = 0.0

        report = MetricsReport(
            throughput_tps=throughput,
            avg_latency_ms=avg,
            p50_latency_ms=p50,
            p95_latency_ms=p95,
            queue_series=tuple(tuple(series) for series in self._samples),
            affected_count=self.affected,
            submitted_count=self.submitted,
            malicious_submitted=self.malicious_submitted,
            committed_count=self.committed,
            malicious_committed=self.malicious_committed,
            rejected_count=self.rejected,
            evicted_count=self.evicted,
            pending_count=pending_count,
            duration_s=duration_s,
            end_ms=end_ms,
            rejection_reasons=tuple(sorted(self._reasons.items())),
            ordering_violations=self.ordering_violations,
        )
        if not report.conserved:
            logger.error(f"Transaction accounting does not add up: {report.summary()}")
        return report


def run_params(cfg, run: int = 0) -> Dict[str, Any]:
    """Parameter columns for an ExperimentConfig."""
    return {
        'run': run,
        'shards': cfg.shards,
        'injection_tps': cfg.injection_tps,
        'malicious_fraction': cfg.malicious_fraction,
        'sharder': cfg.sharder,
        'seed': cfg.seed,
    }


def _params(params: Dict[str, Any]) -> Dict[str, Any]:
    return {column: params.get(column) for column in PARAM_COLUMNS}


def throughput_frame(runs: Sequence[RunResult]) -> pd.DataFrame:
    rows = []
    for params, report in runs:
        row = _params(params)
        row.update({
            'throughput_tps': round(report.throughput_tps, 3),
            'committed_count': report.committed_count,
            'malicious_committed': report.malicious_committed,
            'submitted_count': report.submitted_count,
            'rejected_count': report.rejected_count,
            'pending_count': report.pending_count,
            'affected_count': report.affected_count,
            'duration_s': round(report.duration_s, 3),
        })
        rows.append(row)
    return pd.DataFrame(rows, columns=PARAM_COLUMNS + THROUGHPUT_COLUMNS)


def latency_frame(runs: Sequence[RunResult]) -> pd.DataFrame:
    rows = []
    for params, report in runs:
        row = _params(params)
        row.update({
            'avg_latency_ms': round(report.avg_latency_ms, 3),
            'p50_latency_ms': report.p50_latency_ms,
            'p95_latency_ms': report.p95_latency_ms,
            'committed_count': report.committed_count,
        })
        rows.append(row)
    return pd.DataFrame(rows, columns=PARAM_COLUMNS + LATENCY_COLUMNS)


def queue_frame(runs: Sequence[RunResult], shard: int) -> pd.DataFrame:
    frames = []
    for params, report in runs:
        frame = report.queue_frame(shard)
        for column in reversed(PARAM_COLUMNS):
            frame.insert(0, column, params.get(column))
        frames.append(frame)
    if not frames:
        return pd.DataFrame(columns=PARAM_COLUMNS + QUEUE_COLUMNS)
    return pd.concat(frames, ignore_index=True)[PARAM_COLUMNS + QUEUE_COLUMNS]


def write_csvs(runs: Sequence[RunResult], out_dir: str,
               queue_shards: Optional[Sequence[int]] = None) -> List[str]:
    """
    Write throughput.csv, latency.csv and queue_<shard>.csv files.

    Args:
        runs: (parameter columns, report) pairs
        out_dir: target directory, created if missing
        queue_shards: shards to write queue files for (default: all)

    Returns:
        Paths written
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    path = os.path.join(out_dir, "throughput.csv")
    throughput_frame(runs).to_csv(path, index=False)
    paths.append(path)
    path = os.path.join(out_dir, "latency.csv")
    latency_frame(runs).to_csv(path, index=False)
    paths.append(path)

    if queue_shards is None:
        shard_total = max((len(report.queue_series) for _, report in runs), default=0)
        queue_shards = range(shard_total)
    for shard in queue_shards:
        path = os.path.join(out_dir, f"queue_{shard}.csv")
        queue_frame(runs, shard).to_csv(path, index=False)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} metric files to {out_dir}")
    return paths


def export_to_excel(runs: Sequence[RunResult], filename: str, queue_shards: Sequence[int] = (0,)) -> str:
    """Write the same tables as write_csvs into one workbook."""
    frames = {
        'Throughput': throughput_frame(runs),
        'Latency': latency_frame(runs),
    }
    for shard in queue_shards:
        frames[f'Queue {shard}'] = queue_frame(runs, shard)
    return utils.export_to_excel(frames, filename)
