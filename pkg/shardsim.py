"""
Sharded UTXO blockchain on top of the event engine.

Each shard has a leader, a mempool and a ledger (UtxoSet, blocks, headers).
A transaction is sent by its client to the output shard leader and to the
leader of every input shard. An input shard locks the spent outpoints
(proof-of-acceptance) and sends a proof to the output shard; the output
shard commits the transaction in a block once every input shard has
confirmed. Locks are finalized on commit and released on abort.
"""

import heapq
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

import config
from attackgen import AttackConfig, TimedTx, attack_stream, fund_attacker
from config import ExperimentConfig
from core import (PLACEHOLDER_OUTPUT, ZERO_DIGEST, BlockHeader, MissingOutpointError, DoubleSpendError, Outpoint,
                  PlacementState, Transaction, UtxoDelta, UtxoSet)
from debug_utils import global_debug_tracker
from hashshard import HashSharder, TxSharder, validate_shard_count
from metrics import MetricsCollector, MetricsReport, run_params
from simengine import Event, EventKind, NetworkModel, Simulator
from tee import (AttestedPlacement, EnclaveInstance, HostStorage, Platform, ProgramDescriptor,
                 encrypt_for_enclave, verify_attestation)
from workload import PowerLawSpec, WorkloadTx, load_dataset, synth_generate

logger = logging.getLogger(__name__)


class SafetyViolationError(RuntimeError):
    """Raised by audit() when ledger invariants do not hold."""


class ValidatorNode(NamedTuple):
    node_id: int
    shard: int
    region: int
    is_leader: bool


def assign_validators(count: int, n: int, rng: np.random.Generator,
                      network: Optional[NetworkModel] = None) -> List[ValidatorNode]:
    """
    Distribute validators uniformly at random over n shards.

    Every shard receives at least one node; the lowest node id of each shard is
    its leader. With a network model the nodes are also placed in regions.
    """
    validate_shard_count(n)
    if count < n:
        raise ValueError(f"Need at least one validator per shard: {count} validators for {n} shards")
    shards = rng.integers(0, n, size=count)
    seats = rng.permutation(count)[:n]
    shards[seats] = np.arange(n)
    regions = network.assign_regions(range(count), rng) if network is not None else {}

    leaders: Dict[int, int] = {}
    for node_id, shard in enumerate(shards.tolist()):
        leaders.setdefault(shard, node_id)
    return [
        ValidatorNode(node_id, shard, regions.get(node_id, 0), leaders[shard] == node_id)
        for node_id, shard in enumerate(shards.tolist())
    ]


class Block(NamedTuple):
    shard: int
    height: int
    timestamp_ms: int
    txids: Tuple[bytes, ...]


@dataclass
class ShardLedger:
    """BC_i, BH_i and U_i of one shard."""

    shard: int
    utxo: UtxoSet = field(default_factory=UtxoSet)
    blocks: List[Block] = field(default_factory=list)
    headers: List[BlockHeader] = field(default_factory=list)

    @property
    def height(self) -> int:
        return len(self.headers)

    @property
    def tip_digest(self) -> bytes:
        return self.headers[-1].digest() if self.headers else ZERO_DIGEST


class ShardedChainState:
    """
    The ledgers of all shards plus the placement map txid -> shard.

    height is the number of blocks sealed across all shards. With keep_journal
    every (header, delta) pair is kept in seal order for enclave catch-up.
    """

    def __init__(self, n: int, keep_journal: bool = False):
        self.shard_count = validate_shard_count(n)
        self.ledgers = [ShardLedger(shard) for shard in range(n)]
        self.placement: Dict[bytes, int] = {}
        self.committed_counts = [0] * n
        self.spent_inputs = 0
        self.keep_journal = keep_journal
        self.journal: List[Tuple[BlockHeader, UtxoDelta]] = []
        self._height = 0

    @property
    def height(self) -> int:
        return self._height

    def shard_of_input(self, outpoint: Outpoint) -> Optional[int]:
        return self.placement.get(outpoint.txid)

    def placement_state(self, inputs: Sequence[Outpoint], loads: Optional[Sequence[int]] = None) -> PlacementState:
        return PlacementState(
            height=self._height,
            inputs=tuple((op, self.placement.get(op.txid)) for op in inputs),
            loads=tuple(loads if loads is not None else self.committed_counts),
        )

    def place(self, txid: bytes, shard: int) -> None:
        self.placement[txid] = shard

    def preload(self, txid: bytes, output_count: int, shard: int) -> None:
        """Create pre-existing outputs without sealing a block."""
        self.placement[txid] = shard
        self.ledgers[shard].utxo.add_transaction(txid, output_count)

    def validate(self, tx) -> None:
        """
        Check that every input of tx is unspent in its shard.

        Raises:
            MissingOutpointError: for inputs that were never created
            DoubleSpendError: for spent, locked or repeated inputs
        """
        if len(set(tx.inputs)) != len(tx.inputs):
            raise DoubleSpendError(f"{tx.txid.hex()} spends the same outpoint twice")
        if tx.txid in self.placement:
            raise DoubleSpendError(f"{tx.txid.hex()} is already on the ledger")
        for op in tx.inputs:
            shard = self.placement.get(op.txid)
            if shard is None:
                raise MissingOutpointError(f"Outpoint {op} does not exist")
            status = self.ledgers[shard].utxo.status(op)
            if status == "missing":
                raise MissingOutpointError(f"Outpoint {op} does not exist")
            if status != "unspent":
                raise DoubleSpendError(f"Outpoint {op} is {status}")

    def commit_block(self, shard: int, txs: Sequence[Any], timestamp_ms: int,
                     locked: bool = False) -> Tuple[Block, BlockHeader, UtxoDelta]:
        """
        Apply txs in shard and seal a block.

        Inputs are finalized (locked=True, the cross-shard path) or spent
        directly; outputs are created in `shard`.
        """
        spent: List[Outpoint] = []
        created: List[Tuple[bytes, int]] = []
        for tx in txs:
            for op in tx.inputs:
                utxo = self.ledgers[self.placement[op.txid]].utxo
                if locked:
                    utxo.finalize(op, tx.txid)
                else:
                    utxo.spend(op)
                spent.append(op)
            self.placement[tx.txid] = shard
            self.ledgers[shard].utxo.add_transaction(tx.txid, tx.output_count)
            created.append((tx.txid, tx.output_count))
            self.committed_counts[shard] += 1
        self.spent_inputs += len(spent)
        return self.seal_block(shard, [tx.txid for tx in txs], UtxoDelta(tuple(created), tuple(spent)),
                               timestamp_ms)

    def seal_block(self, shard: int, txids: Sequence[bytes], delta: UtxoDelta,
                   timestamp_ms: int) -> Tuple[Block, BlockHeader, UtxoDelta]:
        ledger = self.ledgers[shard]
        header = BlockHeader(shard, ledger.height + 1, ledger.tip_digest, delta.digest(),
                             len(txids), timestamp_ms)
        block = Block(shard, header.height, timestamp_ms, tuple(txids))
        ledger.blocks.append(block)
        ledger.headers.append(header)
        ledger.utxo.state_height = header.height
        self._height += 1
        if self.keep_journal:
            self.journal.append((header, delta))
        return block, header, delta

    def history_since(self, height: int) -> List[Tuple[BlockHeader, UtxoDelta]]:
        """(header, delta) pairs sealed after global height `height`."""
        if not self.keep_journal:
            raise RuntimeError("history_since needs a chain state created with keep_journal=True")
        return self.journal[height:]

    def audit(self) -> Dict[str, int]:
        """
        Check header chaining, block/header agreement and spend accounting.

        Raises:
            SafetyViolationError: listing every violated invariant
        """
        problems = []
        for ledger in self.ledgers:
            prev = ZERO_DIGEST
            if len(ledger.blocks) != len(ledger.headers):
                problems.append(f"shard {ledger.shard}: {len(ledger.blocks)} blocks vs {len(ledger.headers)} headers")
            for expected, (block, header) in enumerate(zip(ledger.blocks, ledger.headers), start=1):
                if header.height != expected or header.prev_digest != prev:
                    problems.append(f"shard {ledger.shard}: header {expected} does not extend its parent")
                    break
                if header.tx_count != len(block.txids):
                    problems.append(f"shard {ledger.shard}: header {expected} tx_count mismatch")
                    break
                prev = header.digest()
        spent = sum(ledger.utxo.spent_count for ledger in self.ledgers)
        if spent != self.spent_inputs:
            problems.append(f"{spent} outpoints spent but {self.spent_inputs} inputs committed")
        if problems:
            for problem in problems:
                logger.error(f"Audit: {problem}")
            raise SafetyViolationError("; ".join(problems))
        return {
            'blocks': sum(len(ledger.blocks) for ledger in self.ledgers),
            'committed': sum(self.committed_counts),
            'spent': spent,
            'unspent': sum(len(ledger.utxo) for ledger in self.ledgers),
            'locked': sum(ledger.utxo.locked_count for ledger in self.ledgers),
        }


class Phase(str, Enum):
    PENDING_INPUTS = "pending-inputs"
    READY = "ready"
    COMMITTED = "committed"
    REJECTED = "rejected"


@dataclass(eq=False)
class CrossShardTx:
    """Lifecycle of one submitted transaction."""

    tx: WorkloadTx
    output_shard: int
    inputs_by_shard: Dict[int, List[Outpoint]]
    submit_ms: int
    client: Any
    confirmations: Set[int] = field(default_factory=set)
    locked: List[Tuple[int, Outpoint]] = field(default_factory=list)
    phase: Phase = Phase.PENDING_INPUTS
    arrived: bool = False
    arrival_seq: int = -1

    @property
    def txid(self) -> bytes:
        return self.tx.txid

    @property
    def input_shards(self) -> Set[int]:
        return set(self.inputs_by_shard)


class Mempool:
    """
    Unbounded mempool of one shard.

    Holds every transaction that reached the leader and is not yet committed:
    not-ready ones wait for input-shard proofs, ready ones are ordered by
    arrival (fifo) or by fee rate, then arrival (feerate).
    """

    def __init__(self, shard: int, policy: str = "fifo"):
        if policy not in config.MEMPOOL_POLICIES:
            raise config.ConfigError(f"Unknown mempool policy {policy!r}")
        self.shard = shard
        self.policy = policy
        self._waiting: Dict[bytes, CrossShardTx] = {}
        self._ready: Dict[bytes, CrossShardTx] = {}
        self._heap: List[Tuple] = []
        self._arrivals = 0

    def __len__(self) -> int:
        return len(self._waiting) + len(self._ready)

    def __contains__(self, txid: bytes) -> bool:
        return txid in self._waiting or txid in self._ready

    @property
    def ready_count(self) -> int:
        return len(self._ready)

    def add(self, ctx: CrossShardTx) -> None:
        if ctx.txid in self:
            raise ValueError(f"Transaction {ctx.txid.hex()} is already in mempool {self.shard}")
        ctx.arrival_seq = self._arrivals
        self._arrivals += 1
        self._waiting[ctx.txid] = ctx

    def mark_ready(self, ctx: CrossShardTx) -> None:
        self._waiting.pop(ctx.txid, None)
        self._ready[ctx.txid] = ctx
        if self.policy == "feerate":
            key = (-ctx.tx.fee_rate, ctx.arrival_seq, ctx.txid)
        else:
            key = (ctx.arrival_seq, ctx.txid)
        heapq.heappush(self._heap, key)

    def discard(self, txid: bytes) -> None:
        self._waiting.pop(txid, None)
        self._ready.pop(txid, None)

    def take(self, limit: int) -> List[CrossShardTx]:
        """Remove and return up to `limit` ready transactions in policy order."""
        taken = []
        while self._heap and len(taken) < limit:
            txid = heapq.heappop(self._heap)[-1]
            ctx = self._ready.pop(txid, None)
            if ctx is not None:
                taken.append(ctx)
        return taken


def make_sharder(cfg: ExperimentConfig) -> TxSharder:
    """Hash sharding, or the enclave's placement program run in the clear."""
    if cfg.sharder in ("tee", "tee-attested"):
        return ProgramDescriptor(cfg.shards, load_slack=cfg.load_slack).build_placer()
    return HashSharder(cfg.shards, cfg.bit_order)


def enclave_request_tx(tx: WorkloadTx) -> Transaction:
    """Transaction sent to the enclave for a workload record; the record's txid rides in the nonce."""
    return Transaction(tx.inputs, (PLACEHOLDER_OUTPUT,) * tx.output_count, nonce_bytes=tx.txid,
                       size_bytes=tx.size_bytes)


class EnclavePlacement:
    """
    Output shards obtained from an emulated enclave.

    Every sealed block of the chain is fed to update_state before the next
    request, so the enclave places from the committed view only.
    """

    def __init__(self, cfg: ExperimentConfig, chain: ShardedChainState):
        if not chain.keep_journal:
            raise ValueError("EnclavePlacement needs a chain state created with keep_journal=True")
        self.chain = chain
        self.program = ProgramDescriptor(cfg.shards, load_slack=cfg.load_slack)
        self.enclave = EnclaveInstance(Platform.from_seed(cfg.seed), HostStorage(), "simulation")
        self.enclave.install(self.program)
        self.synced = 0

    def sync(self) -> int:
        pending = self.chain.history_since(self.synced)
        if pending:
            headers, deltas = zip(*pending)
            self.enclave.update_state(headers, deltas)
            self.synced += len(pending)
        return self.enclave.state_height

    def place(self, tx: WorkloadTx) -> AttestedPlacement:
        """
        Encrypt tx for the enclave, resume it and check the signature.

        Raises:
            SafetyViolationError: when the enclave gives no placement or a bad signature
        """
        self.sync()
        placement = self.enclave.resume(encrypt_for_enclave(self.enclave.encryption_key, enclave_request_tx(tx)))
        if placement is None or not verify_attestation(self.enclave.public_key, self.enclave.identity, placement):
            raise SafetyViolationError(f"Enclave gave no valid placement for {tx.txid.hex()}")
        return placement


class ShardedSimulation:
    """
    One experiment: validators, clients, mempools and ledgers driven by the
    event engine from a timed transaction stream.
    """

    def __init__(self, cfg: ExperimentConfig, network: Optional[NetworkModel] = None,
                 sharder: Optional[TxSharder] = None, record_trace: bool = False):
        self.cfg = cfg
        self.n = cfg.shards
        self.sim = Simulator(record_trace=record_trace)
        self.network = network if network is not None else NetworkModel.from_tables(
            cfg.network_tables, cfg.jitter_ms, cfg.seed)
        self.sharder = sharder if sharder is not None else make_sharder(cfg)
        self.chain = ShardedChainState(self.n, keep_journal=cfg.sharder == "tee-attested")
        self.attestor = EnclavePlacement(cfg, self.chain) if cfg.sharder == "tee-attested" else None
        self.metrics = MetricsCollector(self.n)
        self.mempools = [Mempool(shard, cfg.mempool_policy) for shard in range(self.n)]
        self.assigned = [0] * self.n

        rng = np.random.default_rng(cfg.seed)
        self.validators = assign_validators(cfg.validators, self.n, rng, self.network)
        self.leaders = [0] * self.n
        for node in self.validators:
            if node.is_leader:
                self.leaders[node.shard] = node.node_id
        self.clients = [("client", i) for i in range(cfg.clients)]
        self.network.assign_regions(self.clients, rng)

        self._inflight: Dict[bytes, CrossShardTx] = {}
        self._waiters: Dict[bytes, List[Tuple[bytes, int]]] = {}
        self._stream: Iterator[TimedTx] = iter(())
        self._stream_done = False
        self._next_client = 0
        self._finished = False

        self.sim.register_handler(EventKind.TX_ARRIVAL, self._on_tx_arrival)
        self.sim.register_handler(EventKind.MESSAGE_DELIVERY, self._on_message)
        self.sim.register_handler(EventKind.PROOF_DELIVERY, self._on_proof)
        self.sim.register_handler(EventKind.BLOCK_FOUND, self._on_block_found)
        self.sim.register_handler(EventKind.METRICS_SAMPLE, self._on_sample)
        self.sim.register_handler(EventKind.EVICTION_CHECK, self._on_eviction_check)
        self.sim.register_handler(EventKind.STOP, lambda event: self._finish())

    @property
    def inflight_count(self) -> int:
        return len(self._inflight)

    def phase_of(self, txid: bytes) -> Optional[Phase]:
        ctx = self._inflight.get(txid)
        if ctx is not None:
            return ctx.phase
        shard = self.chain.placement.get(txid)
        if shard is not None and self.chain.ledgers[shard].utxo.has_transaction(txid):
            return Phase.COMMITTED
        return Phase.REJECTED if txid in self.chain.placement else None

    def queue_sizes(self) -> List[int]:
        return [len(mempool) for mempool in self.mempools]

    def preload(self, tx: WorkloadTx) -> int:
        """
        Commit a genesis transaction before the measured run; returns its shard.

        With enclave placement the outputs are also sealed in a one-tx block so
        the enclave can resolve spends of them.
        """
        if self.attestor is not None:
            shard = self.attestor.place(tx).s_out
        elif self.sharder.needs_state:
            shard = self.sharder(tx, self.chain.placement_state(tx.inputs, self.assigned))
        else:
            shard = self.sharder(tx)
        self.chain.preload(tx.txid, tx.output_count, shard)
        if self.attestor is not None:
            self.chain.seal_block(shard, [tx.txid], UtxoDelta(((tx.txid, tx.output_count),), ()), self.sim.now)
        self.assigned[shard] += 1
        return shard

    def submit_transaction(self, tx: WorkloadTx,
                           attested: Optional[AttestedPlacement] = None) -> Optional[CrossShardTx]:
        """
        Register tx at the current simulated time and send it to its leaders.

        The output shard comes from the sharder, or from an attested placement
        when one is given; a placement attesting another transaction is
        rejected. Returns None when the tx is rejected on submission.
        """
        now = self.sim.now
        client = self.clients[self._next_client % len(self.clients)]
        self._next_client += 1

        inputs_by_shard: Dict[int, List[Outpoint]] = {}
        missing = False
        for op in tx.inputs:
            shard = self.chain.placement.get(op.txid)
            if shard is None:
                missing = True
                break
            inputs_by_shard.setdefault(shard, []).append(op)

        if attested is not None:
            output_shard = attested.s_out
        elif self.sharder.needs_state:
            output_shard = self.sharder(tx, self.chain.placement_state(tx.inputs, self.assigned))
        else:
            output_shard = self.sharder(tx)

        affected = self.cfg.target_shard == output_shard or self.cfg.target_shard in inputs_by_shard
        self.metrics.on_submit(now, tx.malicious, affected)

        reason = None
        if missing:
            reason = "missing-input"
        elif tx.txid in self.chain.placement:
            reason = "duplicate"
        elif len(set(tx.inputs)) != len(tx.inputs):
            reason = "double-spend"
        elif attested is not None and attested.h_tx != enclave_request_tx(tx).txid:
            reason = "attestation-mismatch"
        if reason is not None:
            self.metrics.on_reject(now, tx.malicious, reason)
            return None

        self.chain.place(tx.txid, output_shard)
        self.assigned[output_shard] += 1
        ctx = CrossShardTx(tx, output_shard, inputs_by_shard, now, client)
        self._inflight[tx.txid] = ctx

        leader = self.leaders[output_shard]
        delay = self.network.message_delay(client, leader, tx.size_bytes)
        self.sim.schedule(now + delay, EventKind.MESSAGE_DELIVERY, ("tx", tx.txid, output_shard))
        for shard in inputs_by_shard:
            if shard != output_shard:
                delay = self.network.message_delay(client, self.leaders[shard], tx.size_bytes)
                self.sim.schedule(now + delay, EventKind.MESSAGE_DELIVERY, ("lock", tx.txid, shard))
        return ctx

    def _on_message(self, event: Event) -> None:
        action, txid, shard = event.payload
        ctx = self._inflight.get(txid)
        if ctx is None:
            return
        if action == "tx":
            ctx.arrived = True
            self.mempools[shard].add(ctx)
            if ctx.tx.malicious and self.cfg.relay_only_policy == "evict":
                self.sim.schedule(event.fire_time + self.cfg.relay_only_evict_after_ms,
                                  EventKind.EVICTION_CHECK, txid)
            if shard in ctx.inputs_by_shard:
                self._lock_inputs(ctx, shard)
            else:
                self._check_ready(ctx)
        else:
            self._lock_inputs(ctx, shard)

    def _lock_inputs(self, ctx: CrossShardTx, shard: int) -> None:
        """Lock ctx's inputs held by `shard`; waits on uncommitted parents."""
        utxo = self.chain.ledgers[shard].utxo
        for op in ctx.inputs_by_shard[shard]:
            status = utxo.status(op)
            if status == "unspent":
                utxo.lock(op, ctx.txid)
                ctx.locked.append((shard, op))
            elif status == "locked" and utxo.locked_by(op) == ctx.txid:
                continue
            elif status == "missing":
                if op.txid in self._inflight:
                    self._waiters.setdefault(op.txid, []).append((ctx.txid, shard))
                else:
                    self._reject(ctx, "missing-input")
                return
            else:
                self._reject(ctx, "double-spend")
                return

        if shard == ctx.output_shard:
            self._confirm(ctx, shard)
        else:
            delay = self.network.message_delay(self.leaders[shard], self.leaders[ctx.output_shard],
                                               config.PROOF_SIZE_BYTES)
            self.sim.schedule(self.sim.now + delay, EventKind.PROOF_DELIVERY, (ctx.txid, shard))

    def _on_proof(self, event: Event) -> None:
        txid, shard = event.payload
        ctx = self._inflight.get(txid)
        if ctx is not None:
            self._confirm(ctx, shard)

    def _confirm(self, ctx: CrossShardTx, shard: int) -> None:
        ctx.confirmations.add(shard)
        self._check_ready(ctx)

    def _check_ready(self, ctx: CrossShardTx) -> None:
        if ctx.phase is not Phase.PENDING_INPUTS or not ctx.arrived:
            return
        if len(ctx.confirmations) != len(ctx.inputs_by_shard):
            return
        if ctx.tx.malicious and self.cfg.relay_only_policy == "hold":
            return
        ctx.phase = Phase.READY
        self.mempools[ctx.output_shard].mark_ready(ctx)

    def _reject(self, ctx: CrossShardTx, reason: str) -> None:
        """Abort ctx and, transitively, every transaction waiting on its outputs."""
        stack = [(ctx, reason)]
        while stack:
            current, why = stack.pop()
            if current.phase in (Phase.REJECTED, Phase.COMMITTED):
                continue
            current.phase = Phase.REJECTED
            for shard, op in current.locked:
                self.chain.ledgers[shard].utxo.release(op, current.txid)
            current.locked.clear()
            self.mempools[current.output_shard].discard(current.txid)
            del self._inflight[current.txid]
            self.metrics.on_reject(self.sim.now, current.tx.malicious, why)
            for child_txid, _ in self._waiters.pop(current.txid, ()):
                child = self._inflight.get(child_txid)
                if child is not None:
                    stack.append((child, "missing-input"))
        self._maybe_finish()

    def produce_block(self, shard: int, at_time: int) -> Block:
        """
        Commit up to block_capacity ready transactions of `shard`.

        A transaction is only committed after every input shard confirmed it
        and every parent is on the ledger; one that is not is counted as an
        ordering violation and aborted.
        """
        batch = []
        for ctx in self.mempools[shard].take(self.cfg.block_capacity):
            if self._commit_order_holds(ctx):
                batch.append(ctx)
            else:
                self.metrics.on_ordering_violation()
                self._reject(ctx, "ordering")
        block, _, _ = self.chain.commit_block(shard, [ctx.tx for ctx in batch], at_time, locked=True)
        for ctx in batch:
            ctx.phase = Phase.COMMITTED
            ctx.locked.clear()
            del self._inflight[ctx.txid]
            self.metrics.on_commit(at_time, ctx.submit_ms, ctx.tx.malicious)
        for ctx in batch:
            for child_txid, child_shard in self._waiters.pop(ctx.txid, ()):
                child = self._inflight.get(child_txid)
                if child is not None and child.phase is Phase.PENDING_INPUTS:
                    self._lock_inputs(child, child_shard)
        return block

    def _commit_order_holds(self, ctx: CrossShardTx) -> bool:
        if ctx.confirmations != ctx.input_shards:
            return False
        for op in ctx.tx.inputs:
            parent_shard = self.chain.placement.get(op.txid)
            if parent_shard is None or not self.chain.ledgers[parent_shard].utxo.has_transaction(op.txid):
                return False
        return True

    def _on_block_found(self, event: Event) -> None:
        shard = event.payload
        self.produce_block(shard, event.fire_time)
        self.sim.schedule(event.fire_time + self.cfg.block_interval_ms, EventKind.BLOCK_FOUND, shard)
        self._maybe_finish()

    def _on_sample(self, event: Event) -> None:
        self.metrics.sample_queues(event.fire_time, self.queue_sizes())
        self.sim.schedule(event.fire_time + self.cfg.queue_sample_ms, EventKind.METRICS_SAMPLE)

    def _on_eviction_check(self, event: Event) -> None:
        ctx = self._inflight.get(event.payload)
        if ctx is not None:
            self._reject(ctx, "evicted")

    def _on_tx_arrival(self, event: Event) -> None:
        item: TimedTx = event.payload
        if item.tx.genesis:
            self.preload(item.tx)
        elif self.attestor is not None:
            self.submit_transaction(item.tx, self.attestor.place(item.tx))
        else:
            self.submit_transaction(item.tx)
        self._schedule_next_arrival()

    def _schedule_next_arrival(self) -> None:
        for item in self._stream:
            if item.tx.genesis and item.time_ms <= self.sim.now:
                self.preload(item.tx)
                continue
            self.sim.schedule(max(item.time_ms, self.sim.now), EventKind.TX_ARRIVAL, item)
            return
        self._stream_done = True
        self.sim.schedule(self.sim.now + self.cfg.drain_timeout_ms, EventKind.STOP)
        self._maybe_finish()

    def _maybe_finish(self) -> None:
        if self._stream_done and not self._inflight:
            self._finish()

    def _finish(self) -> None:
        if self._finished:
            return
        self._finished = True
        self.metrics.sample_queues(self.sim.now, self.queue_sizes())
        self.sim.stop()

    def run(self, stream: Iterable[TimedTx]) -> MetricsReport:
        """Feed the stream lazily, run to exhaustion plus drain, return metrics."""
        self._stream = iter(stream)
        interval = self.cfg.block_interval_ms
        for shard in range(self.n):
            self.sim.schedule(interval + shard * interval // self.n, EventKind.BLOCK_FOUND, shard)
        self.sim.schedule(0, EventKind.METRICS_SAMPLE)
        self._schedule_next_arrival()
        if not self._finished:
            self.sim.run_until()

        if self._inflight:
            logger.warning(f"Drain timeout reached with {len(self._inflight)} transactions pending")
        report = self.metrics.finalize(self.sim.now, pending_count=len(self._inflight))
        self.chain.audit()
        if report.ordering_violations:
            raise SafetyViolationError(f"{report.ordering_violations} transactions reached a block "
                                       f"before their inputs were confirmed")
        return report


def law_spec(law) -> PowerLawSpec:
    return PowerLawSpec(law.scale, law.exponent, law.x_max)


def workload_stream(cfg: ExperimentConfig) -> Iterator[WorkloadTx]:
    if cfg.workload.source == "file":
        return load_dataset(cfg.workload.path)
    rng = np.random.default_rng(cfg.seed)
    return synth_generate(cfg.workload.count, law_spec(cfg.degree_law), law_spec(cfg.inshard_law),
                          cfg.shards, rng, cfg.workload.recency_window, byteorder=cfg.bit_order)


def attack_config(cfg: ExperimentConfig, workload_count: int) -> Optional[AttackConfig]:
    """Funded attacker sized for the expected number of malicious slots."""
    fraction = cfg.malicious_fraction
    if fraction <= 0:
        return None
    if fraction >= 1:
        expected = workload_count
    else:
        expected = workload_count * fraction / (1 - fraction)
    outputs_per_address = 4
    funded = int(math.ceil(expected * 1.2 / outputs_per_address)) + 16
    book, funding = fund_attacker(funded, outputs_per_address, seed=cfg.seed)
    return AttackConfig(target_shard=cfg.target_shard, shard_count=cfg.shards, funded=book,
                        rng_seed=cfg.seed, byteorder=cfg.bit_order, funding=tuple(funding))


def build_stream(cfg: ExperimentConfig) -> Iterator[TimedTx]:
    """Timed stream of workload and attack transactions for cfg."""
    attack = attack_config(cfg, cfg.workload.count)
    max_count = cfg.workload.count if cfg.malicious_fraction >= 1 else None
    return attack_stream(cfg.injection_tps, cfg.malicious_fraction, attack, workload_stream(cfg),
                         rng_seed=cfg.seed, max_count=max_count)


def run_experiment(cfg: ExperimentConfig, stream: Optional[Iterable[TimedTx]] = None,
                   network: Optional[NetworkModel] = None) -> MetricsReport:
    """
    Run one experiment.

    Args:
        cfg: validated experiment configuration
        stream: timed transactions; built from cfg when omitted
        network: network model; loaded from cfg.network_tables when omitted

    Returns:
        MetricsReport of the run
    """
    logger.info(f"Running {cfg.shards} shards at {cfg.injection_tps} tps, "
                f"malicious fraction {cfg.malicious_fraction}, sharder {cfg.sharder}")
    simulation = ShardedSimulation(cfg, network)
    report = simulation.run(stream if stream is not None else build_stream(cfg))
    global_debug_tracker.track_run("run_experiment", run_params(cfg), report.summary())
    logger.info(f"Throughput {report.throughput_tps:.1f} tps, latency {report.avg_latency_ms:.0f} ms, "
                f"{report.committed_count} committed")
    return report


def best_injection_tps(cfg: ExperimentConfig) -> float:
    """Aggregate block capacity in tps: shards * capacity / interval."""
    return cfg.shards * cfg.block_capacity * 1000 / cfg.block_interval_ms


def run_experiments(cfgs: Sequence[ExperimentConfig], workers: int = 1) -> List[Tuple[Dict[str, Any], MetricsReport]]:
    """Run independent experiments, in worker processes when workers > 1."""
    if workers <= 1 or len(cfgs) <= 1:
        reports = [run_experiment(cfg) for cfg in cfgs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_experiment, cfgs))
    return [(run_params(cfg, run=i), report) for i, (cfg, report) in enumerate(zip(cfgs, reports))]


def seeded_runs(cfg: ExperimentConfig, runs: int) -> List[ExperimentConfig]:
    """`runs` copies of cfg with independent seeds derived from cfg.seed."""
    seeds = np.random.SeedSequence(cfg.seed).generate_state(runs, np.uint32).tolist()
    return [cfg.replace(seed=int(seed)) for seed in seeds] if runs > 1 else [cfg]


def throughput_sweep(base: ExperimentConfig, shard_counts: Sequence[int], fractions: Sequence[float],
                     workers: int = 1) -> List[Tuple[Dict[str, Any], MetricsReport]]:
    """Throughput versus malicious fraction for each shard count, at base.injection_tps."""
    cfgs = [base.replace(shards=n, malicious_fraction=f, target_shard=0)
            for n in shard_counts for f in fractions]
    return run_experiments(cfgs, workers)


def latency_sweep(base: ExperimentConfig, shard_counts: Sequence[int], fractions: Sequence[float],
                  workers: int = 1) -> List[Tuple[Dict[str, Any], MetricsReport]]:
    """Latency versus malicious fraction, injecting at each shard count's best-throughput rate."""
    cfgs = []
    for n in shard_counts:
        sized = base.replace(shards=n, target_shard=0)
        cfgs.extend(sized.replace(malicious_fraction=f, injection_tps=best_injection_tps(sized))
                    for f in fractions)
    return run_experiments(cfgs, workers)


def queue_sweep(base: ExperimentConfig, shard_counts: Sequence[int], fractions: Sequence[float],
                workers: int = 1) -> List[Tuple[Dict[str, Any], MetricsReport]]:
    """Queue series of shard 0 over malicious fractions and shard counts."""
    return latency_sweep(base, shard_counts, fractions, workers)
