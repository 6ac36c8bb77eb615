"""
Domain types shared by every module: transactions, outpoints, UTXO sets,
address books, block headers and placement state.

Canonical transaction layout (all integers little-endian):

    u32 version (=1)
    u32 input_count,  then per input:  32-byte txid | u32 index
    u32 output_count, then per output: u16 address_len | address | u64 value
    u16 nonce_len | nonce_bytes
    u32 size_bytes

txid = SHA256(SHA256(layout)).
"""

import hashlib
import logging
import struct
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple, Union

import config

logger = logging.getLogger(__name__)

TX_VERSION = 1
DIGEST_SIZE = 32
ZERO_DIGEST = bytes(DIGEST_SIZE)

_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_INPUT = struct.Struct("<32sI")
_VALUE = struct.Struct("<Q")
_HEADER = struct.Struct("<IQ32s32sIQ")
HEADER_SIZE = _HEADER.size


class MalformedTransactionError(ValueError):
    """Raised for bytes or fields that do not form a canonical transaction."""


class MissingOutpointError(KeyError):
    """Raised when an outpoint was never created in a UTXO set."""


class DoubleSpendError(ValueError):
    """Raised when an outpoint is already spent or locked by another transaction."""


class DuplicateOutpointError(ValueError):
    """Raised when an outpoint would be created a second time."""


class InsufficientInputValueError(ValueError):
    """Raised when outputs are worth more than the inputs they spend."""


class InsufficientFundsError(ValueError):
    """Raised when no funded address can pay for a transaction."""


def double_sha256(data: bytes) -> bytes:
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


class Outpoint(NamedTuple):
    txid: bytes
    index: int

    def __str__(self) -> str:
        return f"{self.txid.hex()}:{self.index}"


class TxOutput(NamedTuple):
    address: bytes
    value: int


PLACEHOLDER_OUTPUT = TxOutput(b"", 0)


def serialize_inputs(inputs: Sequence[Outpoint]) -> bytes:
    """Version word plus the input section of the canonical layout."""
    try:
        parts = [_U32.pack(TX_VERSION), _U32.pack(len(inputs))]
        parts.extend(_INPUT.pack(op.txid, op.index) for op in inputs)
    except struct.error as e:
        raise MalformedTransactionError(f"Cannot serialize inputs: {str(e)}")
    return b"".join(parts)


def serialize_outputs(outputs: Sequence[TxOutput], nonce_bytes: bytes, size_bytes: int) -> bytes:
    """Output section, nonce and declared size of the canonical layout."""
    try:
        parts = [_U32.pack(len(outputs))]
        for out in outputs:
            parts.append(_U16.pack(len(out.address)))
            parts.append(out.address)
            parts.append(_VALUE.pack(out.value))
        parts.append(_U16.pack(len(nonce_bytes)))
        parts.append(nonce_bytes)
        parts.append(_U32.pack(size_bytes))
    except struct.error as e:
        raise MalformedTransactionError(f"Cannot serialize outputs: {str(e)}")
    return b"".join(parts)


@dataclass(frozen=True)
class Transaction:
    """UTXO-model transaction. Immutable; txid is derived from the canonical bytes."""

    inputs: Tuple[Outpoint, ...] = ()
    outputs: Tuple[TxOutput, ...] = ()
    nonce_bytes: bytes = b""
    size_bytes: int = config.AVG_TX_SIZE_BYTES

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(Outpoint(*op) for op in self.inputs))
        object.__setattr__(self, "outputs", tuple(TxOutput(*out) for out in self.outputs))
        if self.size_bytes <= 0:
            raise MalformedTransactionError("size_bytes must be positive")
        for op in self.inputs:
            if len(op.txid) != DIGEST_SIZE or op.index < 0:
                raise MalformedTransactionError(f"Invalid outpoint {op!r}")
        for out in self.outputs:
            if out.value < 0:
                raise MalformedTransactionError("Output values must be >= 0")

    @cached_property
    def txid(self) -> bytes:
        return compute_txid(self)

    @property
    def output_count(self) -> int:
        return len(self.outputs)

    @property
    def output_value(self) -> int:
        return sum(out.value for out in self.outputs)

    def outpoints(self) -> List[Outpoint]:
        """Outpoints created by this transaction."""
        return [Outpoint(self.txid, i) for i in range(len(self.outputs))]


def serialize(tx: Transaction) -> bytes:
    return serialize_inputs(tx.inputs) + serialize_outputs(tx.outputs, tx.nonce_bytes, tx.size_bytes)


def compute_txid(tx: Transaction) -> bytes:
    return double_sha256(serialize(tx))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, size: int) -> bytes:
        end = self.pos + size
        if end > len(self.data):
            raise MalformedTransactionError(
                f"Truncated transaction: need {size} bytes at offset {self.pos}"
            )
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, layout: struct.Struct) -> tuple:
        return layout.unpack(self.take(layout.size))


def deserialize(data: bytes) -> Transaction:
    """
    Parse canonical bytes back into a Transaction.

    Raises:
        MalformedTransactionError: on truncation, trailing bytes or a bad version
    """
    reader = _Reader(bytes(data))
    (version,) = reader.unpack(_U32)
    if version != TX_VERSION:
        raise MalformedTransactionError(f"Unsupported transaction version {version}")

    (input_count,) = reader.unpack(_U32)
    inputs = [Outpoint(*reader.unpack(_INPUT)) for _ in range(input_count)]

    (output_count,) = reader.unpack(_U32)
    outputs = []
    for _ in range(output_count):
        (addr_len,) = reader.unpack(_U16)
        address = reader.take(addr_len)
        (value,) = reader.unpack(_VALUE)
        outputs.append(TxOutput(address, value))

    (nonce_len,) = reader.unpack(_U16)
    nonce = reader.take(nonce_len)
    (size_bytes,) = reader.unpack(_U32)

    if reader.pos != len(reader.data):
        raise MalformedTransactionError(
            f"Trailing garbage: {len(reader.data) - reader.pos} bytes after transaction"
        )
    return Transaction(tuple(inputs), tuple(outputs), nonce, size_bytes)


class _TxOutputs:
    """Per-transaction bookkeeping; bit i of each mask describes output i."""

    __slots__ = ("values", "created", "unspent", "locked")

    def __init__(self):
        self.values: Optional[Dict[int, TxOutput]] = None
        self.created = 0
        self.unspent = 0
        self.locked = 0


@dataclass
class BlockUndo:
    spent: List[Tuple[Outpoint, TxOutput]]
    created: List[Outpoint]


class UtxoSet:
    """
    Unspent outputs of one shard.

    Each outpoint moves through created -> (locked ->) spent exactly once. Locks
    model a cross-shard proof-of-acceptance: the output is reserved for one
    spending transaction and either finalized (spent) or released on abort.
    Single writer; callers serialize mutation.
    """

    def __init__(self):
        self._records: Dict[bytes, _TxOutputs] = {}
        self._lock_owner: Dict[Outpoint, bytes] = {}
        self._unspent_count = 0
        self._spent_count = 0
        self.state_height = 0

    def __len__(self) -> int:
        return self._unspent_count

    def __contains__(self, outpoint: Outpoint) -> bool:
        rec = self._records.get(outpoint.txid)
        return rec is not None and bool(rec.unspent >> outpoint.index & 1)

    @property
    def spent_count(self) -> int:
        return self._spent_count

    @property
    def locked_count(self) -> int:
        return len(self._lock_owner)

    def has_transaction(self, txid: bytes) -> bool:
        return txid in self._records

    def locked_by(self, outpoint: Outpoint) -> Optional[bytes]:
        return self._lock_owner.get(outpoint)

    def status(self, outpoint: Outpoint) -> str:
        """One of 'unspent', 'locked', 'spent', 'missing'."""
        rec = self._records.get(outpoint.txid)
        if rec is None or outpoint.index < 0:
            return "missing"
        bit = 1 << outpoint.index
        if not rec.created & bit:
            return "missing"
        if rec.unspent & bit:
            return "unspent"
        if rec.locked & bit:
            return "locked"
        return "spent"

    def get(self, outpoint: Outpoint) -> Optional[TxOutput]:
        """Output behind an unspent or locked outpoint, else None."""
        if self.status(outpoint) not in ("unspent", "locked"):
            return None
        values = self._records[outpoint.txid].values
        if values is None:
            return PLACEHOLDER_OUTPUT
        return values.get(outpoint.index, PLACEHOLDER_OUTPUT)

    def entries(self) -> Dict[Outpoint, TxOutput]:
        """Materialized map of unspent outpoints (for small sets and audits)."""
        result = {}
        for txid, rec in self._records.items():
            mask, index = rec.unspent, 0
            while mask:
                if mask & 1:
                    value = rec.values.get(index, PLACEHOLDER_OUTPUT) if rec.values else PLACEHOLDER_OUTPUT
                    result[Outpoint(txid, index)] = value
                mask >>= 1
                index += 1
        return result

    def add(self, outpoint: Outpoint, output: Optional[TxOutput] = None) -> None:
        rec = self._records.get(outpoint.txid)
        if rec is None:
            rec = self._records[outpoint.txid] = _TxOutputs()
        bit = 1 << outpoint.index
        if rec.created & bit:
            raise DuplicateOutpointError(f"Outpoint {outpoint} already created")
        rec.created |= bit
        rec.unspent |= bit
        if output is not None and output is not PLACEHOLDER_OUTPUT:
            if rec.values is None:
                rec.values = {}
            rec.values[outpoint.index] = output
        self._unspent_count += 1

    def add_transaction(self, txid: bytes, outputs: Union[int, Sequence[TxOutput]]) -> None:
        """Create every output of a transaction; an int creates value-less placeholders."""
        if txid in self._records:
            raise DuplicateOutpointError(f"Transaction {txid.hex()} already has outputs")
        count = outputs if isinstance(outputs, int) else len(outputs)
        rec = self._records[txid] = _TxOutputs()
        rec.created = rec.unspent = (1 << count) - 1
        if not isinstance(outputs, int):
            rec.values = {i: out for i, out in enumerate(outputs)}
        self._unspent_count += count

    def _require(self, outpoint: Outpoint, expected: str) -> _TxOutputs:
        state = self.status(outpoint)
        if state == "missing":
            raise MissingOutpointError(f"Outpoint {outpoint} does not exist")
        if state != expected:
            raise DoubleSpendError(f"Outpoint {outpoint} is {state}")
        return self._records[outpoint.txid]

    def spend(self, outpoint: Outpoint) -> TxOutput:
        output = self.get(outpoint)
        rec = self._require(outpoint, "unspent")
        rec.unspent &= ~(1 << outpoint.index)
        self._unspent_count -= 1
        self._spent_count += 1
        return output

    def lock(self, outpoint: Outpoint, owner: bytes) -> None:
        if self._lock_owner.get(outpoint) == owner:
            return
        rec = self._require(outpoint, "unspent")
        bit = 1 << outpoint.index
        rec.unspent &= ~bit
        rec.locked |= bit
        self._lock_owner[outpoint] = owner
        self._unspent_count -= 1

    def _check_owner(self, outpoint: Outpoint, owner: bytes) -> _TxOutputs:
        rec = self._require(outpoint, "locked")
        if self._lock_owner.get(outpoint) != owner:
            raise DoubleSpendError(f"Outpoint {outpoint} is locked by another transaction")
        return rec

    def release(self, outpoint: Outpoint, owner: bytes) -> None:
        rec = self._check_owner(outpoint, owner)
        bit = 1 << outpoint.index
        rec.locked &= ~bit
        rec.unspent |= bit
        del self._lock_owner[outpoint]
        self._unspent_count += 1

    def finalize(self, outpoint: Outpoint, owner: bytes) -> None:
        rec = self._check_owner(outpoint, owner)
        rec.locked &= ~(1 << outpoint.index)
        del self._lock_owner[outpoint]
        self._spent_count += 1

    def validate_tx(self, tx: Transaction) -> int:
        """
        Check a transaction against this set without mutating it.

        Returns:
            The fee (inputs minus outputs)
        """
        if len(set(tx.inputs)) != len(tx.inputs):
            raise DoubleSpendError("Transaction spends the same outpoint twice")
        total_in = 0
        for op in tx.inputs:
            self._require(op, "unspent")
            total_in += self.get(op).value
        fee = total_in - tx.output_value
        if tx.inputs and fee < 0:
            raise InsufficientInputValueError(
                f"Outputs ({tx.output_value}) exceed inputs ({total_in})"
            )
        return fee

    def apply_block(self, txs: Iterable[Transaction]) -> BlockUndo:
        """Apply transactions atomically; on error nothing is changed."""
        undo = BlockUndo(spent=[], created=[])
        try:
            for tx in txs:
                for op in tx.inputs:
                    undo.spent.append((op, self.spend(op)))
                for i, out in enumerate(tx.outputs):
                    op = Outpoint(tx.txid, i)
                    self.add(op, out)
                    undo.created.append(op)
        except (MissingOutpointError, DoubleSpendError, DuplicateOutpointError):
            self._undo(undo)
            raise
        self.state_height += 1
        return undo

    def revert_block(self, undo: BlockUndo) -> None:
        self._undo(undo)
        self.state_height -= 1

    def _undo(self, undo: BlockUndo) -> None:
        for op in reversed(undo.created):
            rec = self._records[op.txid]
            bit = 1 << op.index
            rec.created &= ~bit
            rec.unspent &= ~bit
            if rec.values:
                rec.values.pop(op.index, None)
            if not rec.created:
                del self._records[op.txid]
            self._unspent_count -= 1
        for op, _ in reversed(undo.spent):
            self._records[op.txid].unspent |= 1 << op.index
            self._unspent_count += 1
            self._spent_count -= 1


class AddressBook:
    """
    Attacker addresses (all_addresses) and the funded subset with its UTXOs.

    Every funded address keeps at least one unspent outpoint; an address whose
    outpoints are all taken leaves the funded set.
    """

    def __init__(self, addresses: Iterable[bytes] = ()):
        self.all_addresses: Set[bytes] = set(addresses)
        self._funds: Dict[bytes, List[Tuple[Outpoint, int]]] = {}
        self._balances: Dict[bytes, int] = {}
        self._funded_list: List[bytes] = []
        self._funded_pos: Dict[bytes, int] = {}

    @property
    def funded_addresses(self) -> Set[bytes]:
        return set(self._funded_list)

    @property
    def outpoint_count(self) -> int:
        return sum(len(items) for items in self._funds.values())

    def add_address(self, address: bytes) -> None:
        self.all_addresses.add(address)

    def fund(self, address: bytes, outpoint: Outpoint, value: int) -> None:
        self.all_addresses.add(address)
        if address not in self._funds:
            self._funds[address] = []
            self._balances[address] = 0
            self._funded_pos[address] = len(self._funded_list)
            self._funded_list.append(address)
        self._funds[address].append((outpoint, value))
        self._balances[address] += value

    def balance(self, address: bytes) -> int:
        return self._balances.get(address, 0)

    def _unfund(self, address: bytes) -> None:
        pos = self._funded_pos.pop(address)
        last = self._funded_list.pop()
        if last != address:
            self._funded_list[pos] = last
            self._funded_pos[last] = pos
        del self._funds[address]
        del self._balances[address]

    def _draw(self, address: bytes, required: int) -> List[Tuple[Outpoint, int]]:
        taken, total = [], 0
        items = self._funds[address]
        while total < required and items:
            op, value = items.pop()
            taken.append((op, value))
            total += value
        self._balances[address] -= total
        if not items:
            self._unfund(address)
        return taken

    def take_inputs(self, required: int, rng) -> List[Tuple[Outpoint, int]]:
        """
        Remove and return outpoints of one funded address worth at least `required`.

        Args:
            required: minimum total value in satoshi
            rng: random.Random-compatible generator

        Raises:
            InsufficientFundsError: if no single address can pay
        """
        candidates = self._funded_list
        for _ in range(min(len(candidates), 16)):
            address = candidates[rng.randrange(len(candidates))]
            if self._balances[address] >= required:
                return self._draw(address, required)
        for address in list(candidates):
            if self._balances[address] >= required:
                return self._draw(address, required)
        raise InsufficientFundsError(
            f"No funded address holds {required} satoshi ({len(candidates)} funded addresses left)"
        )

    def partition(self, parts: int) -> List["AddressBook"]:
        """Split funded outpoints into disjoint books sharing the same address set."""
        books = [AddressBook(self.all_addresses) for _ in range(parts)]
        slot = 0
        for address in sorted(self._funds):
            for op, value in self._funds[address]:
                books[slot % parts].fund(address, op, value)
                slot += 1
        return books


class UtxoDelta(NamedTuple):
    """Outputs created (txid, output count) and outpoints spent by one block."""

    created: Tuple[Tuple[bytes, int], ...] = ()
    spent: Tuple[Outpoint, ...] = ()

    def encode(self) -> bytes:
        parts = [_U32.pack(len(self.created))]
        parts.extend(txid + _U32.pack(count) for txid, count in self.created)
        parts.append(_U32.pack(len(self.spent)))
        parts.extend(_INPUT.pack(op.txid, op.index) for op in self.spent)
        return b"".join(parts)

    def digest(self) -> bytes:
        return double_sha256(self.encode())

    @classmethod
    def decode(cls, data: bytes) -> "UtxoDelta":
        reader = _Reader(data)
        (created_count,) = reader.unpack(_U32)
        created = []
        for _ in range(created_count):
            txid = reader.take(DIGEST_SIZE)
            (count,) = reader.unpack(_U32)
            created.append((txid, count))
        (spent_count,) = reader.unpack(_U32)
        spent = tuple(Outpoint(*reader.unpack(_INPUT)) for _ in range(spent_count))
        if reader.pos != len(data):
            raise MalformedTransactionError("Trailing bytes after block delta")
        return cls(tuple(created), spent)


class BlockHeader(NamedTuple):
    shard: int
    height: int
    prev_digest: bytes
    delta_digest: bytes
    tx_count: int
    timestamp_ms: int

    def encode(self) -> bytes:
        return _HEADER.pack(self.shard, self.height, self.prev_digest,
                            self.delta_digest, self.tx_count, self.timestamp_ms)

    def digest(self) -> bytes:
        return double_sha256(self.encode())

    @classmethod
    def decode(cls, data: bytes) -> "BlockHeader":
        if len(data) != _HEADER.size:
            raise MalformedTransactionError(f"Block header must be {_HEADER.size} bytes")
        return cls(*_HEADER.unpack(data))


class PlacementState(NamedTuple):
    """
    The state `st` a placement is computed from: a state height, the shard
    holding each input (None when unresolved) and per-shard placed-tx counts.
    """

    height: int
    inputs: Tuple[Tuple[Outpoint, Optional[int]], ...]
    loads: Tuple[int, ...]

    @property
    def resolved(self) -> bool:
        return all(shard is not None for _, shard in self.inputs)

    @property
    def shard_count(self) -> int:
        return len(self.loads)
