#!/usr/bin/env python3
"""
Tests for malicious transaction grinding and attack streams.
"""

import random
import sys

import numpy as np
import pytest
from scipy import stats

from attackgen import (AttackConfig, InsufficientFundsError, attack_stream, bench_generation, fund_attacker,
                       generate_malicious_tx, grind_batch, grind_transaction, split_value)
from core import UtxoSet
from hashshard import shard_of
from workload import synth_generate


def attacker(n=16, target=3, funded=20, outputs=50, **kwargs):
    book, genesis = fund_attacker(funded, outputs, seed=5)
    return AttackConfig(target, n, book, funding=tuple(genesis), **kwargs)


def test_fee_and_config_validation():
    cfg = attacker()
    assert cfg.fee == 500
    book, _ = fund_attacker(1, 1)
    with pytest.raises(ValueError):
        AttackConfig(16, 16, book)
    with pytest.raises(ValueError):
        AttackConfig(0, 16, book, min_relay_fee=0)
    with pytest.raises(ValueError):
        AttackConfig(0, 16, book, worker_count=0)


def test_split_value_keeps_total():
    assert split_value(1001, 2) == [501, 500]
    assert sum(split_value(99_500, 7)) == 99_500


def test_malicious_tx_lands_on_target_and_validates():
    cfg = attacker()
    utxo = UtxoSet()
    for tx in cfg.funding:
        utxo.add_transaction(tx.txid, tx.outputs)
    rng = random.Random(2)
    for _ in range(50):
        tx = generate_malicious_tx(cfg, rng)
        assert shard_of(tx.txid, 16) == 3
        assert tx.size_bytes == 500
        assert utxo.validate_tx(tx) == cfg.fee
        utxo.apply_block([tx])


def test_acceptance_ratio_is_one_over_n():
    cfg = attacker(n=16, funded=40, outputs=50)
    rng = random.Random(9)
    hashes = 0
    produced = 1500
    for _ in range(produced):
        _, attempts = grind_transaction(cfg, rng)
        hashes += attempts
    assert stats.binomtest(produced, hashes, 1 / 16).pvalue > 0.001


def test_single_shard_takes_one_hash():
    cfg = attacker(n=1, target=0)
    rng = random.Random(0)
    assert all(grind_transaction(cfg, rng)[1] == 1 for _ in range(20))


def test_funds_run_out():
    cfg = attacker(funded=1, outputs=2)
    rng = random.Random(1)
    generate_malicious_tx(cfg, rng)
    generate_malicious_tx(cfg, rng)
    with pytest.raises(InsufficientFundsError):
        generate_malicious_tx(cfg, rng)


def test_single_worker_batch_is_reproducible():
    first = grind_batch(attacker(rng_seed=4), 30)
    second = grind_batch(attacker(rng_seed=4), 30)
    assert [tx.txid for tx in first] == [tx.txid for tx in second]
    assert len({op for tx in first for op in tx.inputs}) == sum(len(tx.inputs) for tx in first)


def test_parallel_batch_uses_disjoint_funds():
    batch = grind_batch(attacker(worker_count=2, rng_seed=4), 40)
    assert len(batch) == 40
    spent = [op for tx in batch for op in tx.inputs]
    assert len(set(spent)) == len(spent)
    assert all(shard_of(tx.txid, 16) == 3 for tx in batch)


def test_bench_generation_reports_rates():
    report = bench_generation(attacker(n=8), 0.3)
    row = report.to_row()
    assert report.malicious > 0
    assert report.hashes >= report.malicious
    assert row["shards"] == 8 and row["threads"] == 1
    with pytest.raises(ValueError):
        bench_generation(attacker(), 0)


def test_attack_stream_mix_and_timing():
    cfg = attacker(funded=40, outputs=50)
    legit = synth_generate(1000, n=16, rng=np.random.default_rng(3))
    stream = list(attack_stream(500, 0.25, cfg, legit, rng_seed=8))

    genesis = [item for item in stream if item.tx.genesis]
    slots = [item for item in stream if not item.tx.genesis]
    assert all(item.time_ms == 0 for item in genesis)
    assert [item.time_ms for item in slots] == [i * 1000 // 500 for i in range(len(slots))]

    malicious = [item.tx for item in slots if item.tx.malicious]
    assert sum(not tx.malicious for tx in slots) == 1000
    assert all(shard_of(tx.txid, 16) == 3 for tx in malicious)
    assert stats.binomtest(len(malicious), len(slots), 0.25).pvalue > 0.001


def test_attack_stream_without_attack_is_legit_only():
    legit = list(synth_generate(200, n=4, rng=np.random.default_rng(3)))
    stream = list(attack_stream(100, 0.0, None, legit))
    assert [item.tx for item in stream] == legit
    with pytest.raises(ValueError):
        list(attack_stream(100, 0.5, None, legit))
    with pytest.raises(ValueError):
        list(attack_stream(0, 0.0, None, legit))


def main():
    tests = [(name, func) for name, func in globals().items() if name.startswith("test_") and callable(func)]
    print("🧪 Testing attack generation...")
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
