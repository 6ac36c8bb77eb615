"""
Single-shard flooding attack: malicious transaction grinding, attack streams
and generation benchmarks.
"""

import logging
import math
import random
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import config
from core import (AddressBook, InsufficientFundsError, Outpoint, Transaction, TxOutput,
                  deserialize, double_sha256, serialize, serialize_inputs, serialize_outputs)
from debug_utils import debug_performance
from hashshard import validate_shard_count
from utils import format_number
from workload import WorkloadTx

logger = logging.getLogger(__name__)

__all__ = [
    "AttackConfig", "InsufficientFundsError", "RateReport", "TimedTx", "attack_stream",
    "bench_generation", "fund_attacker", "generate_malicious_tx", "grind_batch",
    "grind_transaction",
]


@dataclass
class AttackConfig:
    """Parameters of the grinding attacker."""

    target_shard: int
    shard_count: int
    funded: AddressBook
    min_relay_fee: int = config.MIN_RELAY_FEE_SAT_PER_KB
    worker_count: int = 1
    rng_seed: int = 0
    size_bytes: int = config.AVG_TX_SIZE_BYTES
    outputs_per_tx: int = 2
    byteorder: str = "big"
    nonce_threshold: int = 1 << 16
    funding: Tuple[Transaction, ...] = field(default_factory=tuple)

    def __post_init__(self):
        validate_shard_count(self.shard_count)
        if not 0 <= self.target_shard < self.shard_count:
            raise ValueError(f"target_shard must be in [0, {self.shard_count})")
        if self.min_relay_fee <= 0:
            raise ValueError("min_relay_fee must be > 0")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.outputs_per_tx < 1:
            raise ValueError("outputs_per_tx must be >= 1")
        if not self.funded.all_addresses:
            raise ValueError("AddressBook has no addresses to pay to")

    @property
    def fee(self) -> int:
        """Minimum relay fee for one transaction of size_bytes."""
        return int(math.ceil(self.min_relay_fee * self.size_bytes / 1000))

    def output_addresses(self) -> List[bytes]:
        return sorted(self.funded.all_addresses)


def attack_cost(tx_count: int, min_relay_fee: float = config.MIN_RELAY_FEE_SAT_PER_KB,
                avg_size_bytes: int = config.AVG_TX_SIZE_BYTES,
                usd_per_satoshi: float = config.USD_PER_SATOSHI) -> float:
    """USD paid in minimum relay fees for tx_count malicious transactions."""
    fee_per_tx = min_relay_fee * avg_size_bytes / 1000
    return round(tx_count * fee_per_tx * usd_per_satoshi, 10)


def fund_attacker(funded_count: int, outputs_per_address: int, value: int = 100_000,
                  spare_addresses: int = 256, seed: int = 0) -> Tuple[AddressBook, List[Transaction]]:
    """
    Build an attacker AddressBook and the genesis transactions creating its UTXOs.

    Each funded address receives one genesis transaction with outputs_per_address
    outputs of `value` satoshi; spare addresses are output-only.
    """
    rng = random.Random(seed)
    book = AddressBook()
    genesis = []
    for i in range(funded_count):
        address = rng.randbytes(config.ADDRESS_BYTES)
        tx = Transaction((), (TxOutput(address, value),) * outputs_per_address,
                         nonce_bytes=b"fund" + i.to_bytes(4, "little"))
        for op in tx.outpoints():
            book.fund(address, op, value)
        genesis.append(tx)
    for _ in range(spare_addresses):
        book.add_address(rng.randbytes(config.ADDRESS_BYTES))
    logger.info(f"Funded {funded_count} attacker addresses with {funded_count * outputs_per_address} outputs")
    return book, genesis


def split_value(total: int, parts: int) -> List[int]:
    share, remainder = divmod(total, parts)
    return [share + remainder] + [share] * (parts - 1)


def _grind(prefix: bytes, values: Sequence[int], addresses: Sequence[bytes], n: int, target: int,
           byteorder: str, size_bytes: int, use_nonce: bool,
           rng: random.Random) -> Tuple[Tuple[TxOutput, ...], bytes, int]:
    """Resample outputs (and nonce) until the txid suffix selects the target shard."""
    attempts = 0
    while True:
        attempts += 1
        outputs = tuple(TxOutput(addresses[rng.randrange(len(addresses))], v) for v in values)
        nonce = rng.getrandbits(64).to_bytes(8, "little") if use_nonce else b""
        digest = double_sha256(prefix + serialize_outputs(outputs, nonce, size_bytes))
        if n == 1 or int.from_bytes(digest, byteorder) % n == target:
            return outputs, nonce, attempts


def grind_transaction(cfg: AttackConfig, rng: random.Random,
                      inputs: Optional[Sequence[Tuple[Outpoint, int]]] = None) -> Tuple[Transaction, int]:
    """
    Generate one malicious transaction.

    Inputs are taken from the funded set once; only outputs vary while grinding.

    Args:
        cfg: attack parameters
        rng: random.Random seeded by the caller
        inputs: (outpoint, value) pairs to spend instead of drawing from cfg.funded

    Returns:
        (transaction, number of hashes computed)
    """
    fee = cfg.fee
    taken = list(inputs) if inputs is not None else cfg.funded.take_inputs(fee, rng)
    total = sum(value for _, value in taken)
    if total < fee:
        raise InsufficientFundsError(f"Inputs worth {total} cannot pay fee {fee}")

    spend = tuple(op for op, _ in taken)
    addresses = cfg.output_addresses()
    values = split_value(total - fee, cfg.outputs_per_tx)
    use_nonce = len(addresses) ** cfg.outputs_per_tx < cfg.nonce_threshold
    outputs, nonce, attempts = _grind(
        serialize_inputs(spend), values, addresses, cfg.shard_count, cfg.target_shard,
        cfg.byteorder, cfg.size_bytes, use_nonce, rng,
    )
    return Transaction(spend, outputs, nonce, cfg.size_bytes), attempts


def generate_malicious_tx(cfg: AttackConfig, rng: random.Random) -> Transaction:
    tx, _ = grind_transaction(cfg, rng)
    return tx


def derive_seed(seed: int, index: int) -> int:
    """Independent per-worker seed derived from (seed, worker index)."""
    return int(np.random.SeedSequence([seed & (2 ** 64 - 1), index]).generate_state(2, np.uint64)[0])


def _grind_worker(cfg: AttackConfig, worker_index: int, quota: int) -> List[Tuple[int, int, bytes]]:
    rng = random.Random(derive_seed(cfg.rng_seed, worker_index))
    results = []
    for _ in range(quota):
        tx, _ = grind_transaction(cfg, rng)
        results.append((time.perf_counter_ns(), worker_index, serialize(tx)))
    return results


def grind_batch(cfg: AttackConfig, count: int) -> List[Transaction]:
    """
    Generate `count` malicious transactions with cfg.worker_count workers.

    Workers get disjoint shares of the funded outpoints and seeds derived from
    (rng_seed, worker index); results are merged by generation timestamp. With a
    single worker the output is bit-reproducible.
    """
    if cfg.worker_count == 1:
        rng = random.Random(derive_seed(cfg.rng_seed, 0))
        return [grind_transaction(cfg, rng)[0] for _ in range(count)]

    books = cfg.funded.partition(cfg.worker_count)
    quotas = [count // cfg.worker_count + (i < count % cfg.worker_count) for i in range(cfg.worker_count)]
    merged: List[Tuple[int, int, bytes]] = []
    with ProcessPoolExecutor(max_workers=cfg.worker_count) as pool:
        futures = []
        for index, (book, quota) in enumerate(zip(books, quotas)):
            worker_cfg = AttackConfig(cfg.target_shard, cfg.shard_count, book, cfg.min_relay_fee, 1,
                                      cfg.rng_seed, cfg.size_bytes, cfg.outputs_per_tx, cfg.byteorder,
                                      cfg.nonce_threshold)
            futures.append(pool.submit(_grind_worker, worker_cfg, index, quota))
        for future in futures:
            merged.extend(future.result())
    merged.sort(key=lambda item: (item[0], item[1]))
    return [deserialize(raw) for _, _, raw in merged]


@dataclass(frozen=True)
class RateReport:
    shard_count: int
    workers: int
    seconds: float
    hashes: int
    malicious: int
    hashes_per_sec: float
    malicious_per_sec: float

    @property
    def malicious_per_hash(self) -> float:
        return self.malicious / self.hashes if self.hashes else 0.0

    def to_row(self) -> dict:
        return {
            'shards': self.shard_count,
            'threads': self.workers,
            'seconds': round(self.seconds, 3),
            'hashes': self.hashes,
            'malicious': self.malicious,
            'hashes_per_sec': round(self.hashes_per_sec, 1),
            'malicious_per_sec': round(self.malicious_per_sec, 1),
            'malicious_per_hash': round(self.malicious_per_hash, 6),
        }


def _bench_worker(cfg: AttackConfig, worker_index: int, duration: float) -> Tuple[int, int, float]:
    rng = random.Random(derive_seed(cfg.rng_seed, worker_index))
    value = cfg.fee * 10
    hashes = malicious = 0
    start = time.perf_counter()
    deadline = start + duration
    while time.perf_counter() < deadline:
        inputs = [(Outpoint(rng.randbytes(32), rng.randrange(4)), value)]
        _, attempts = grind_transaction(cfg, rng, inputs=inputs)
        hashes += attempts
        malicious += 1
    return hashes, malicious, time.perf_counter() - start


@debug_performance
def bench_generation(cfg: AttackConfig, duration_seconds: float) -> RateReport:
    """
    Measure hashing and malicious-transaction generation rates.

    Hashes are counted for completed transactions only, so
    malicious_per_sec * n ~= hashes_per_sec. Inputs are synthetic and reused,
    leaving cfg.funded untouched.
    """
    if duration_seconds <= 0:
        raise ValueError("duration_seconds must be > 0")

    if cfg.worker_count == 1:
        results = [_bench_worker(cfg, 0, duration_seconds)]
    else:
        with ProcessPoolExecutor(max_workers=cfg.worker_count) as pool:
            futures = [pool.submit(_bench_worker, cfg, i, duration_seconds) for i in range(cfg.worker_count)]
            results = [f.result() for f in futures]

    hashes = sum(r[0] for r in results)
    malicious = sum(r[1] for r in results)
    hashes_rate = sum(r[0] / r[2] for r in results if r[2] > 0)
    malicious_rate = sum(r[1] / r[2] for r in results if r[2] > 0)
    report = RateReport(cfg.shard_count, cfg.worker_count, max(r[2] for r in results),
                        hashes, malicious, hashes_rate, malicious_rate)
    logger.info(f"n={cfg.shard_count}: {format_number(hashes_rate)} hashes/s, "
                f"{format_number(malicious_rate)} malicious tx/s")
    return report


class TimedTx(NamedTuple):
    time_ms: int
    tx: WorkloadTx


def attack_stream(total_rate_tps: float, malicious_fraction: float, cfg: Optional[AttackConfig],
                  legit_source: Iterable[WorkloadTx], rng_seed: Optional[int] = None,
                  max_count: Optional[int] = None) -> Iterator[TimedTx]:
    """
    Interleave ground malicious transactions into a legitimate stream at a fixed total rate.

    Slot i is emitted at floor(i * 1000 / rate) ms and is malicious with probability
    malicious_fraction. Genesis records (legitimate history and the attacker's
    funding) are emitted first at time 0 and take no slot. The stream ends when the
    legitimate source is exhausted, or when funds run out with fraction 1.
    """
    if not 0.0 <= malicious_fraction <= 1.0:
        raise ValueError("malicious_fraction must be in [0, 1]")
    if total_rate_tps <= 0:
        raise ValueError("total_rate_tps must be > 0")
    if malicious_fraction > 0 and cfg is None:
        raise ValueError("An AttackConfig is required for a malicious fraction above 0")

    seed = rng_seed if rng_seed is not None else (cfg.rng_seed if cfg else 0)
    slot_rng = random.Random(derive_seed(seed, 1))
    grind_rng = random.Random(derive_seed(seed, 0))
    attacking = malicious_fraction > 0

    if cfg is not None:
        for tx in cfg.funding:
            yield TimedTx(0, WorkloadTx.from_transaction(tx, genesis=True))

    legit = iter(legit_source)
    pending_legit = None
    for tx in legit:
        if not tx.genesis:
            pending_legit = tx
            break
        yield TimedTx(0, tx)

    slot = 0
    while max_count is None or slot < max_count:
        at = slot * 1000 // total_rate_tps
        if attacking and slot_rng.random() < malicious_fraction:
            try:
                tx = generate_malicious_tx(cfg, grind_rng)
            except InsufficientFundsError:
                logger.warning(f"Attacker funds exhausted after {slot} slots; continuing with legitimate traffic")
                attacking = False
            else:
                yield TimedTx(int(at), WorkloadTx.from_transaction(tx, malicious=True, fee_rate=cfg.min_relay_fee))
                slot += 1
                continue
            if malicious_fraction >= 1.0:
                return
        while pending_legit is not None and pending_legit.genesis:
            yield TimedTx(int(at), pending_legit)
            pending_legit = next(legit, None)
        if pending_legit is None:
            return
        yield TimedTx(int(at), pending_legit)
        slot += 1
        pending_legit = next(legit, None)
