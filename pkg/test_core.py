#!/usr/bin/env python3
"""
Tests for transactions, UTXO sets, address books and block headers.
"""

import random
import sys

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core import (HEADER_SIZE, ZERO_DIGEST, AddressBook, BlockHeader, DoubleSpendError,
                  DuplicateOutpointError, InsufficientFundsError, InsufficientInputValueError,
                  MalformedTransactionError, MissingOutpointError, Outpoint, PlacementState, Transaction,
                  TxOutput, UtxoDelta, UtxoSet, compute_txid, deserialize, double_sha256, serialize)


def make_tx(inputs=(), values=(1000,), nonce=b"n"):
    outputs = tuple(TxOutput(bytes([i]) * 20, v) for i, v in enumerate(values))
    return Transaction(tuple(inputs), outputs, nonce_bytes=nonce)


outpoints = st.builds(Outpoint, st.binary(min_size=32, max_size=32), st.integers(0, 2 ** 32 - 1))
tx_outputs = st.builds(TxOutput, st.binary(max_size=40), st.integers(0, 2 ** 64 - 1))


@settings(max_examples=60, deadline=None)
@given(st.lists(outpoints, max_size=6), st.lists(tx_outputs, max_size=6), st.binary(max_size=16),
       st.integers(1, 100_000))
def test_serialize_round_trip(inputs, outputs, nonce, size_bytes):
    tx = Transaction(tuple(inputs), tuple(outputs), nonce, size_bytes)
    raw = serialize(tx)
    assert deserialize(raw) == tx
    assert tx.txid == double_sha256(raw) == compute_txid(tx)


def test_txid_depends_on_every_field():
    base = make_tx(values=(1000,), nonce=b"a")
    assert make_tx(values=(1001,), nonce=b"a").txid != base.txid
    assert make_tx(values=(1000,), nonce=b"b").txid != base.txid
    assert Transaction(base.inputs, base.outputs, base.nonce_bytes, 501).txid != base.txid


def test_deserialize_rejects_bad_bytes():
    raw = serialize(make_tx())
    with pytest.raises(MalformedTransactionError):
        deserialize(raw + b"\x00")
    with pytest.raises(MalformedTransactionError):
        deserialize(raw[:-1])
    with pytest.raises(MalformedTransactionError):
        deserialize(b"\x02\x00\x00\x00" + raw[4:])


def test_transaction_field_validation():
    with pytest.raises(MalformedTransactionError):
        Transaction((Outpoint(b"short", 0),), ())
    with pytest.raises(MalformedTransactionError):
        Transaction((), (TxOutput(b"a", -1),))
    with pytest.raises(MalformedTransactionError):
        Transaction((), (), size_bytes=0)


def test_outpoints_enumerate_outputs():
    tx = make_tx(values=(1, 2, 3))
    assert tx.outpoints() == [Outpoint(tx.txid, 0), Outpoint(tx.txid, 1), Outpoint(tx.txid, 2)]
    assert tx.output_count == 3
    assert tx.output_value == 6


def test_utxo_spend_once():
    utxo = UtxoSet()
    funding = make_tx(values=(500, 700))
    utxo.add_transaction(funding.txid, funding.outputs)
    op = Outpoint(funding.txid, 1)

    assert op in utxo and len(utxo) == 2
    assert utxo.spend(op).value == 700
    assert utxo.status(op) == "spent"
    assert len(utxo) == 1 and utxo.spent_count == 1
    with pytest.raises(DoubleSpendError):
        utxo.spend(op)
    with pytest.raises(MissingOutpointError):
        utxo.spend(Outpoint(funding.txid, 5))
    with pytest.raises(MissingOutpointError):
        utxo.spend(Outpoint(b"\x01" * 32, 0))


def test_utxo_duplicate_creation():
    utxo = UtxoSet()
    utxo.add(Outpoint(b"\x02" * 32, 0))
    with pytest.raises(DuplicateOutpointError):
        utxo.add(Outpoint(b"\x02" * 32, 0))
    with pytest.raises(DuplicateOutpointError):
        utxo.add_transaction(b"\x02" * 32, 3)


def test_utxo_lock_finalize_release():
    utxo = UtxoSet()
    txid = b"\x03" * 32
    utxo.add_transaction(txid, 2)
    op = Outpoint(txid, 0)
    owner, other = b"\xaa" * 32, b"\xbb" * 32

    utxo.lock(op, owner)
    utxo.lock(op, owner)
    assert utxo.status(op) == "locked"
    assert utxo.locked_by(op) == owner
    assert len(utxo) == 1 and utxo.locked_count == 1
    with pytest.raises(DoubleSpendError):
        utxo.lock(op, other)
    with pytest.raises(DoubleSpendError):
        utxo.release(op, other)
    with pytest.raises(DoubleSpendError):
        utxo.spend(op)

    utxo.release(op, owner)
    assert utxo.status(op) == "unspent" and len(utxo) == 2

    utxo.lock(op, other)
    utxo.finalize(op, other)
    assert utxo.status(op) == "spent"
    assert utxo.locked_count == 0 and utxo.spent_count == 1


def test_apply_block_is_atomic():
    utxo = UtxoSet()
    funding = make_tx(values=(1000,))
    utxo.add_transaction(funding.txid, funding.outputs)
    good = make_tx([Outpoint(funding.txid, 0)], values=(900,), nonce=b"good")
    bad = make_tx([Outpoint(funding.txid, 0)], values=(800,), nonce=b"bad")

    before = utxo.entries()
    with pytest.raises(DoubleSpendError):
        utxo.apply_block([good, bad])
    assert utxo.entries() == before
    assert utxo.state_height == 0

    undo = utxo.apply_block([good])
    assert utxo.state_height == 1
    assert Outpoint(good.txid, 0) in utxo
    utxo.revert_block(undo)
    assert utxo.entries() == before
    assert utxo.spent_count == 0


def test_validate_tx_fee_and_value():
    utxo = UtxoSet()
    funding = make_tx(values=(1000, 500))
    utxo.add_transaction(funding.txid, funding.outputs)
    spend = make_tx([Outpoint(funding.txid, 0), Outpoint(funding.txid, 1)], values=(1400,))
    assert utxo.validate_tx(spend) == 100

    with pytest.raises(InsufficientInputValueError):
        utxo.validate_tx(make_tx([Outpoint(funding.txid, 0)], values=(1001,)))
    with pytest.raises(DoubleSpendError):
        utxo.validate_tx(make_tx([Outpoint(funding.txid, 0)] * 2, values=(1,)))
    assert len(utxo) == 2


def test_address_book_draws_and_unfunds():
    book = AddressBook([b"spare"])
    book.fund(b"alice", Outpoint(b"\x04" * 32, 0), 300)
    book.fund(b"alice", Outpoint(b"\x04" * 32, 1), 300)
    book.fund(b"bob", Outpoint(b"\x05" * 32, 0), 100)
    rng = random.Random(1)

    taken = book.take_inputs(500, rng)
    assert sum(value for _, value in taken) == 600
    assert book.funded_addresses == {b"bob"}
    assert b"alice" in book.all_addresses and b"spare" in book.all_addresses
    with pytest.raises(InsufficientFundsError):
        book.take_inputs(500, rng)


def test_address_book_partition_is_disjoint():
    book = AddressBook()
    for i in range(10):
        book.fund(bytes([i]) * 20, Outpoint(bytes([i]) * 32, 0), 50)
    parts = book.partition(3)
    assert sum(part.outpoint_count for part in parts) == 10
    seen = set()
    rng = random.Random(0)
    for part in parts:
        assert part.all_addresses == book.all_addresses
        ops = set()
        while part.funded_addresses:
            ops |= {op for op, _ in part.take_inputs(1, rng)}
        assert not ops & seen
        seen |= ops
    assert len(seen) == 10


def test_header_and_delta_encoding():
    delta = UtxoDelta(((b"\x06" * 32, 3),), (Outpoint(b"\x07" * 32, 2),))
    header = BlockHeader(1, 4, ZERO_DIGEST, delta.digest(), 1, 12_000)
    assert len(header.encode()) == HEADER_SIZE
    assert BlockHeader.decode(header.encode()) == header
    assert UtxoDelta.decode(delta.encode()) == delta
    assert UtxoDelta(delta.created, ()).digest() != delta.digest()
    with pytest.raises(MalformedTransactionError):
        BlockHeader.decode(header.encode()[:-1])
    with pytest.raises(MalformedTransactionError):
        UtxoDelta.decode(delta.encode() + b"\x00")


def test_placement_state_resolution():
    op = Outpoint(b"\x08" * 32, 0)
    assert PlacementState(3, ((op, 1),), (1, 2)).resolved
    state = PlacementState(3, ((op, 1), (op, None)), (1, 2))
    assert not state.resolved
    assert state.shard_count == 2


def main():
    tests = [(name, func) for name, func in globals().items() if name.startswith("test_") and callable(func)]
    print("🧪 Testing core types...")
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
