#!/usr/bin/env python3
"""
Tests for the sharded chain state, mempools and end-to-end simulation runs.

Runs use a scaled calibration (4 shards, 20 tx per block, 1 s interval,
80 tps capacity) on a zero-latency network so they finish in seconds.
"""

import sys

import numpy as np
import pytest
from scipy import stats

from attackgen import TimedTx
from config import ExperimentConfig, WorkloadConfig
from core import DoubleSpendError, MissingOutpointError, Outpoint
from shardsim import (CrossShardTx, Mempool, Phase, SafetyViolationError, ShardedChainState,
                      ShardedSimulation, assign_validators, best_injection_tps, build_stream,
                      latency_sweep, run_experiment, seeded_runs, throughput_sweep)
from simengine import NetworkModel, zero_latency_tables
from workload import WorkloadTx


def scaled(**changes):
    base = dict(shards=4, injection_tps=80, validators=8, clients=4, block_capacity=20,
                block_interval_ms=1000, queue_sample_ms=1000, seed=3, workload=WorkloadConfig(count=1500))
    base.update(changes)
    return ExperimentConfig(**base)


def local_network(cfg):
    return NetworkModel(zero_latency_tables(), seed=cfg.seed)


def simulate(cfg):
    simulation = ShardedSimulation(cfg, local_network(cfg))
    report = simulation.run(build_stream(cfg))
    return simulation, report


def wtx(tag, inputs=(), outputs=2, **kwargs):
    return WorkloadTx(bytes([tag]) * 32, tuple(inputs), outputs, **kwargs)


def test_assign_validators_covers_every_shard():
    nodes = assign_validators(40, 16, np.random.default_rng(1))
    assert {node.shard for node in nodes} == set(range(16))
    assert sum(node.is_leader for node in nodes) == 16
    with pytest.raises(ValueError):
        assign_validators(3, 4, np.random.default_rng(1))


def test_chain_state_validate_and_commit():
    chain = ShardedChainState(2, keep_journal=True)
    chain.preload(b"\x01" * 32, 2, 0)
    spend = wtx(2, [Outpoint(b"\x01" * 32, 0)])
    chain.validate(spend)
    chain.commit_block(1, [spend], 1000)

    assert chain.height == 1 and chain.committed_counts == [0, 1]
    assert chain.placement[spend.txid] == 1
    with pytest.raises(DoubleSpendError):
        chain.validate(wtx(3, [Outpoint(b"\x01" * 32, 0)]))
    with pytest.raises(DoubleSpendError):
        chain.validate(spend)
    with pytest.raises(MissingOutpointError):
        chain.validate(wtx(4, [Outpoint(b"\x01" * 32, 7)]))
    with pytest.raises(MissingOutpointError):
        chain.validate(wtx(5, [Outpoint(b"\x09" * 32, 0)]))

    header, delta = chain.history_since(0)[0]
    assert header.shard == 1 and header.delta_digest == delta.digest()
    assert delta.spent == (Outpoint(b"\x01" * 32, 0),)
    assert chain.audit()['committed'] == 1


def test_audit_detects_broken_headers():
    chain = ShardedChainState(1)
    chain.preload(b"\x01" * 32, 1, 0)
    chain.commit_block(0, [wtx(2, [Outpoint(b"\x01" * 32, 0)])], 10)
    chain.commit_block(0, [wtx(3)], 20)
    ledger = chain.ledgers[0]
    ledger.headers[1] = ledger.headers[1]._replace(prev_digest=b"\x00" * 32)
    with pytest.raises(SafetyViolationError):
        chain.audit()


def test_mempool_ordering_policies():
    def ctx(tag, fee):
        return CrossShardTx(wtx(tag, fee_rate=fee), 0, {}, 0, None)

    fifo, feerate = Mempool(0, "fifo"), Mempool(0, "feerate")
    for pool in (fifo, feerate):
        items = [ctx(1, 1000), ctx(2, 5000), ctx(3, 2000)]
        for item in items:
            pool.add(item)
        for item in items:
            pool.mark_ready(item)
        assert len(pool) == 3 and pool.ready_count == 3
    assert [c.txid[0] for c in fifo.take(2)] == [1, 2]
    assert [c.txid[0] for c in feerate.take(5)] == [2, 3, 1]
    assert len(fifo) == 1 and len(feerate) == 0
    with pytest.raises(ValueError):
        fifo.add(ctx(3, 0))


def test_cross_shard_transaction_lifecycle():
    cfg = scaled(shards=2, validators=2, clients=1)
    simulation = ShardedSimulation(cfg, local_network(cfg))
    parent = wtx(1, outputs=2, genesis=True)
    child = wtx(2, [Outpoint(parent.txid, 0)], outputs=1)
    grandchild = wtx(3, [Outpoint(child.txid, 0)], outputs=1)
    stream = [TimedTx(0, parent), TimedTx(0, child), TimedTx(0, grandchild)]
    report = simulation.run(stream)

    assert report.committed_count == 2 and report.rejected_count == 0
    assert simulation.phase_of(grandchild.txid) is Phase.COMMITTED
    assert simulation.chain.ledgers[simulation.chain.placement[parent.txid]].utxo.status(
        Outpoint(parent.txid, 0)) == "spent"
    assert simulation.chain.audit()['locked'] == 0


def test_double_spend_and_cascade_rejection():
    cfg = scaled(shards=2, validators=2, clients=1)
    simulation = ShardedSimulation(cfg, local_network(cfg))
    parent = wtx(1, outputs=1, genesis=True)
    first = wtx(2, [Outpoint(parent.txid, 0)], outputs=1)
    second = wtx(3, [Outpoint(parent.txid, 0)], outputs=1)
    orphan = wtx(4, [Outpoint(second.txid, 0)], outputs=1)
    report = simulation.run([TimedTx(0, parent), TimedTx(0, first), TimedTx(0, second), TimedTx(0, orphan)])

    assert report.committed_count == 1
    assert report.rejected_count == 2
    assert dict(report.rejection_reasons) == {"double-spend": 1, "missing-input": 1}
    assert report.conserved


def test_calibrated_throughput_without_attack():
    cfg = scaled()
    _, report = simulate(cfg)
    best = best_injection_tps(cfg)
    assert best == 80
    assert report.committed_count == 1500 and report.pending_count == 0
    assert 0.7 * best <= report.throughput_tps <= 1.1 * best
    assert report.conserved
    assert report.throughput_tps * report.duration_s == pytest.approx(report.committed_count)


def test_flooding_attack_hurts_target_shard():
    _, clean = simulate(scaled())
    _, attacked = simulate(scaled(malicious_fraction=0.5))

    assert attacked.malicious_submitted > 0
    assert attacked.malicious_committed == attacked.malicious_submitted
    assert attacked.throughput_tps < 0.6 * clean.throughput_tps
    assert attacked.avg_latency_ms > 2 * clean.avg_latency_ms
    assert attacked.max_queue(0) > 3 * clean.max_queue(0)
    assert attacked.max_queue(0) > max(attacked.max_queue(s) for s in range(1, 4))


FRACTIONS = (0.0, 0.1, 0.2, 0.3, 0.5)
_sweep_runs = {}


def sweep_run(shards, fraction):
    """
    Flooding run at 80 tps total capacity split over `shards`, injecting 60 tps
    with 4800 workload transactions. Cached across tests.
    """
    key = (shards, fraction)
    if key not in _sweep_runs:
        _sweep_runs[key] = simulate(scaled(shards=shards, validators=shards, block_capacity=80 // shards,
                                           injection_tps=60, malicious_fraction=fraction,
                                           workload=WorkloadConfig(count=4800)))
    return _sweep_runs[key]


def test_target_shard_saturates_at_block_capacity():
    simulation, report = sweep_run(16, 0.5)
    cfg = simulation.cfg
    capacity_tps = cfg.block_capacity * 1000 / cfg.block_interval_ms
    busy = [t for t, size in report.queue_series[0] if size >= 5 * cfg.block_capacity]
    assert len(busy) > 20

    def committed_rate(shard):
        blocks = [b for b in simulation.chain.ledgers[shard].blocks if busy[0] <= b.timestamp_ms <= busy[-1]]
        return sum(len(b.txids) for b in blocks) / (len(blocks) * cfg.block_interval_ms / 1000)

    assert committed_rate(0) == pytest.approx(capacity_tps, rel=0.05)
    assert committed_rate(1) < 0.8 * capacity_tps


def test_throughput_falls_with_attack_fraction():
    reports = [sweep_run(16, fraction)[1] for fraction in FRACTIONS]
    throughput = [report.throughput_tps for report in reports]
    assert all(later <= earlier for earlier, later in zip(throughput, throughput[1:]))

    baseline, attacked = reports[0], reports[FRACTIONS.index(0.2)]
    assert attacked.throughput_tps < 0.5 * baseline.throughput_tps
    assert attacked.avg_latency_ms >= 5 * baseline.avg_latency_ms
    assert all(report.pending_count == 0 and report.conserved for report in reports)


def test_target_queue_grows_an_order_of_magnitude():
    _, clean = sweep_run(16, 0.0)
    _, attacked = sweep_run(16, 0.1)
    assert clean.max_queue(0) > 0
    assert attacked.max_queue(0) > 10 * clean.max_queue(0)


def test_more_shards_are_more_vulnerable():
    def loss(shards):
        return 1 - sweep_run(shards, 0.2)[1].throughput_tps / sweep_run(shards, 0.0)[1].throughput_tps

    assert loss(16) > loss(4)
    assert sweep_run(16, 0.2)[1].max_queue(0) > sweep_run(4, 0.2)[1].max_queue(0)


def test_commit_before_parent_is_an_ordering_violation():
    cfg = scaled(shards=2, validators=2, clients=1)
    simulation = ShardedSimulation(cfg, local_network(cfg))
    parent = wtx(1, outputs=1)
    child = wtx(2, [Outpoint(parent.txid, 0)], outputs=1)
    simulation.submit_transaction(parent)
    ctx = simulation.submit_transaction(child)
    mempool = simulation.mempools[ctx.output_shard]
    mempool.add(ctx)
    mempool.mark_ready(ctx)

    block = simulation.produce_block(ctx.output_shard, 1000)
    assert child.txid not in block.txids
    assert simulation.metrics.ordering_violations == 1
    assert simulation.phase_of(child.txid) is Phase.REJECTED
    assert simulation.phase_of(parent.txid) is Phase.PENDING_INPUTS


def test_enclave_placement_mode_resists_grinding():
    _, hashed = simulate(scaled(malicious_fraction=0.5, workload=WorkloadConfig(count=600)))
    simulation, attested = simulate(scaled(sharder="tee-attested", malicious_fraction=0.5,
                                           workload=WorkloadConfig(count=600)))
    assert attested.committed_count == 600
    assert attested.pending_count == 0 and attested.conserved
    assert attested.max_queue(0) < hashed.max_queue(0)
    assert simulation.attestor.sync() == simulation.chain.height


def test_placement_attesting_another_transaction_is_rejected():
    cfg = scaled(shards=2, validators=2, clients=1, sharder="tee-attested")
    simulation = ShardedSimulation(cfg, local_network(cfg))
    parent = wtx(1, outputs=2, genesis=True)
    parent_shard = simulation.preload(parent)
    first = wtx(2, [Outpoint(parent.txid, 0)])
    second = wtx(3, [Outpoint(parent.txid, 1)])

    placement = simulation.attestor.place(first)
    assert placement.s_out == parent_shard and placement.status == 0
    assert simulation.submit_transaction(second, placement) is None
    ctx = simulation.submit_transaction(first, placement)
    assert ctx.output_shard == placement.s_out
    report = simulation.metrics.finalize(simulation.sim.now, pending_count=simulation.inflight_count)
    assert dict(report.rejection_reasons) == {"attestation-mismatch": 1}


def test_hold_policy_leaves_attack_pending():
    cfg = scaled(injection_tps=40, malicious_fraction=0.3, relay_only_policy="hold", drain_timeout_ms=5000)
    _, report = simulate(cfg)
    assert report.malicious_committed == 0
    assert report.pending_count == report.malicious_submitted > 0
    assert report.committed_count == 1500
    assert report.conserved


def test_evict_policy_accounts_for_every_attack_tx():
    cfg = scaled(malicious_fraction=0.5, relay_only_policy="evict", relay_only_evict_after_ms=3000)
    _, report = simulate(cfg)
    assert report.evicted_count > 0
    assert report.malicious_committed + report.evicted_count == report.malicious_submitted
    assert report.pending_count == 0 and report.conserved


def test_tee_placement_neutralizes_grinding():
    _, hashed = simulate(scaled(malicious_fraction=0.5))
    simulation, balanced = simulate(scaled(malicious_fraction=0.5, sharder="tee", load_slack=0.02))

    assert balanced.max_queue(0) < hashed.max_queue(0)
    assert balanced.throughput_tps > hashed.throughput_tps
    counts = simulation.chain.committed_counts
    assert stats.chisquare(counts).pvalue > 0.01


def test_runs_are_reproducible():
    _, first = simulate(scaled(malicious_fraction=0.2, workload=WorkloadConfig(count=500)))
    _, second = simulate(scaled(malicious_fraction=0.2, workload=WorkloadConfig(count=500)))
    assert first.summary() == second.summary()
    assert first.queue_series == second.queue_series


def test_seeded_runs_and_sweeps():
    cfg = scaled(workload=WorkloadConfig(count=200))
    runs = seeded_runs(cfg, 3)
    assert len({run.seed for run in runs}) == 3
    assert seeded_runs(cfg, 1) == [cfg]

    sized = [params for params, _ in latency_sweep(scaled(workload=WorkloadConfig(count=200)), [2, 4], [0.0])]
    assert [params['injection_tps'] for params in sized] == [40, 80]
    results = throughput_sweep(scaled(workload=WorkloadConfig(count=200)), [2], [0.0, 0.5])
    assert [params['malicious_fraction'] for params, _ in results] == [0.0, 0.5]
    assert all(report.conserved for _, report in results)


def test_run_experiment_with_default_tables():
    cfg = scaled(workload=WorkloadConfig(count=300))
    report = run_experiment(cfg)
    assert report.committed_count == 300
    assert report.avg_latency_ms > 0


def main():
    tests = [(name, func) for name, func in globals().items() if name.startswith("test_") and callable(func)]
    print("🧪 Testing sharded simulation...")
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
