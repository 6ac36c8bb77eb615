"""
Closed-form attack analysis: expected grinding attempts, probability that a
transaction touches the attacked shard, and attack cost.
"""

import logging
import math
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from attackgen import attack_cost
from hashshard import shard_of, validate_shard_count
from workload import DanglingReferenceError, WorkloadTx

logger = logging.getLogger(__name__)


def expected_attempts(n: int) -> float:
    """Expected hashes per malicious transaction: Bernoulli trials at p = 1/n."""
    return float(validate_shard_count(n))


def affected_probability(n: int, m: int) -> float:
    """1 - ((n-1)/n)^(m+1): chance that one of m input shards or the output shard is the target."""
    validate_shard_count(n)
    if m < 0:
        raise ValueError(f"Input count must be >= 0, got {m}")
    return 1.0 - ((n - 1) / n) ** (m + 1)


def affected_curve(shard_counts: Sequence[int], input_counts: Sequence[int]) -> pd.DataFrame:
    """Grid of affected_probability values with columns shards, inputs, affected_probability."""
    rows = [
        {'shards': n, 'inputs': m, 'affected_probability': affected_probability(n, m)}
        for n in shard_counts for m in input_counts
    ]
    return pd.DataFrame(rows, columns=['shards', 'inputs', 'affected_probability'])


def affected_fraction_empirical(workload: Iterable[WorkloadTx], n: int, target: int,
                                sharder=None, byteorder: str = "big") -> float:
    """
    Fraction of transactions with the target among their input shards or as output shard.

    Input shards are the placements of the parent transactions, which must appear
    earlier in the workload. Genesis records only contribute placements.

    Args:
        workload: WorkloadTx stream
        n: shard count
        target: attacked shard
        sharder: optional TxSharder; defaults to hash placement

    Raises:
        DanglingReferenceError: if an input references an unseen transaction
    """
    validate_shard_count(n)
    placements: Dict[bytes, int] = {}
    total = affected = 0
    for tx in workload:
        out = sharder(tx) if sharder is not None else shard_of(tx.txid, n, byteorder)
        placements[tx.txid] = out
        if tx.genesis:
            continue
        shards = {out}
        for op in tx.inputs:
            parent = placements.get(op.txid)
            if parent is None:
                raise DanglingReferenceError(f"{tx.txid.hex()} references unknown {op.txid.hex()}")
            shards.add(parent)
        total += 1
        affected += target in shards

    if total == 0:
        logger.warning("Empty workload: affected fraction reported as 0")
        return 0.0
    return affected / total


def monte_carlo_affected(n: int, m: int, samples: int,
                         rng: Optional[np.random.Generator] = None) -> Tuple[float, float]:
    """
    Estimate affected_probability with i.i.d. uniform shards.

    Returns:
        (estimate, standard error)
    """
    rng = rng if rng is not None else np.random.default_rng()
    draws = rng.integers(0, n, size=(samples, m + 1))
    hits = (draws == 0).any(axis=1)
    p = float(hits.mean())
    return p, math.sqrt(max(p * (1 - p), 1e-12) / samples)


def attack_budget(rate_tps: float, seconds: float, **fee_params) -> float:
    """Cost of sustaining a malicious stream at rate_tps for the given duration."""
    return attack_cost(int(math.ceil(rate_tps * seconds)), **fee_params)


def attempts_table(shard_counts: Sequence[int], hashes_per_sec: float) -> pd.DataFrame:
    """Projected malicious tx/s per shard count for a given hash rate."""
    rows: List[Dict[str, float]] = []
    for n in shard_counts:
        rows.append({
            'shards': n,
            'expected_attempts': expected_attempts(n),
            'malicious_per_sec': hashes_per_sec / expected_attempts(n),
        })
    return pd.DataFrame(rows)
