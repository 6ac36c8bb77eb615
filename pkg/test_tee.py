#!/usr/bin/env python3
"""
Tests for the emulated enclave: placement, attestation, encrypted ingress,
sealed state and rollback detection.
"""

import os
import random
import sys
import tempfile

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from core import ZERO_DIGEST, BlockHeader, Outpoint, PlacementState, Transaction, TxOutput, UtxoDelta
from hashshard import shard_of
from tee import (AttestedPlacement, BalancedInputPlacer, EnclaveError, EnclaveInstance, HostStorage, Platform,
                 PlacementStatus, ProgramDescriptor, RollbackError, SealError, StateUpdateError,
                 encrypt_for_enclave, least_loaded, measure_overhead, txsharding, verify_attestation)

SHARDS = 4


def genesis_tx(i, outputs=2):
    return Transaction((), (TxOutput(bytes([i]) * 20, 1000),) * outputs, nonce_bytes=bytes([i]))


def block_for(shard, height, prev, txs):
    delta = UtxoDelta(tuple((tx.txid, tx.output_count) for tx in txs), ())
    return BlockHeader(shard, height, prev, delta.digest(), len(txs), 0), delta


def spend(*parents):
    inputs = tuple(Outpoint(parent.txid, 0) for parent in parents)
    return Transaction(inputs, (TxOutput(b"\x09" * 20, 500),), nonce_bytes=os.urandom(4))


def installed(storage=None, platform=None, name="placement"):
    enclave = EnclaveInstance(platform or Platform.from_seed(1), storage or HostStorage(), name)
    enclave.install(ProgramDescriptor(SHARDS))
    return enclave


def test_placer_prefers_input_shard_then_load():
    op_a, op_b, op_c = (Outpoint(bytes([i]) * 32, 0) for i in range(3))
    placer = BalancedInputPlacer(SHARDS)
    state = PlacementState(5, ((op_a, 2), (op_b, 2), (op_c, 1)), (0, 9, 9, 0))
    assert placer(None, state) == 2
    assert placer(None, PlacementState(5, ((op_a, 1), (op_b, 3)), (0, 4, 0, 2))) == 3
    assert placer(None, PlacementState(5, ((op_a, None),), (3, 1, 0, 0))) == 2
    assert least_loaded([2, 1, 1, 5]) == 1
    assert txsharding(None, state) == 2
    with pytest.raises(ValueError):
        placer(None, None)


def test_load_slack_overrides_hot_shard():
    op = Outpoint(b"\x01" * 32, 0)
    state = PlacementState(1, ((op, 0),), (30, 10, 10, 10))
    assert BalancedInputPlacer(SHARDS)(None, state) == 0
    assert BalancedInputPlacer(SHARDS, load_slack=0.5)(None, state) == 1


def test_program_identity_is_stable():
    assert ProgramDescriptor(4).identity == ProgramDescriptor(4).identity
    assert ProgramDescriptor(4).identity != ProgramDescriptor(4, load_slack=0.1).identity
    with pytest.raises(EnclaveError):
        ProgramDescriptor(4, placer="hash").build_placer()


def test_resume_signs_a_verifiable_placement():
    enclave = installed()
    parents = [genesis_tx(i) for i in range(3)]
    header, delta = block_for(2, 1, ZERO_DIGEST, parents)
    assert enclave.update_state([header], [delta]) == 1

    tx = spend(parents[0], parents[1])
    placement = enclave.resume(encrypt_for_enclave(enclave.encryption_key, tx))
    assert placement.s_out == 2 and placement.st == 1
    assert placement.h_tx == tx.txid
    assert placement.status == PlacementStatus.OK
    assert verify_attestation(enclave.public_key, enclave.identity, placement)
    assert AttestedPlacement.decode(placement.encode()) == placement

    tampered = AttestedPlacement(3, placement.st, placement.h_tx, placement.status, placement.sigma,
                                 placement.enclave_id)
    assert not verify_attestation(enclave.public_key, enclave.identity, tampered)
    assert not verify_attestation(enclave.public_key, b"\x00" * 32, placement)


def test_unresolved_inputs_are_flagged():
    enclave = installed()
    placement = enclave.resume(encrypt_for_enclave(enclave.encryption_key, spend(genesis_tx(7))))
    assert placement.status == PlacementStatus.UNRESOLVED_INPUTS
    assert verify_attestation(enclave.public_key, enclave.identity, placement)


def test_bad_requests_return_bottom():
    enclave = installed()
    request = bytearray(encrypt_for_enclave(enclave.encryption_key, spend(genesis_tx(1))))
    request[-1] ^= 0x01
    assert enclave.resume(bytes(request)) is None
    other = EnclaveInstance(Platform.from_seed(2), HostStorage(), "other")
    other.install(ProgramDescriptor(SHARDS))
    assert enclave.resume(encrypt_for_enclave(other.encryption_key, spend(genesis_tx(1)))) is None

    fresh = EnclaveInstance(Platform.from_seed(1), HostStorage(), "fresh")
    assert fresh.resume(encrypt_for_enclave(fresh.encryption_key, spend(genesis_tx(1)))) is None


def test_bit_flips_never_verify():
    enclave = installed()
    placement = enclave.resume(encrypt_for_enclave(enclave.encryption_key, spend(genesis_tx(2))))
    encoded = placement.encode()
    rng = random.Random(4)
    accepted = 0
    for _ in range(1000):
        mutated = bytearray(encoded)
        position = rng.randrange(len(encoded) - len(placement.enclave_id) - 2)
        mutated[position] ^= 1 << rng.randrange(8)
        candidate = AttestedPlacement.decode(bytes(mutated))
        accepted += verify_attestation(enclave.public_key, enclave.identity, candidate)
    assert accepted == 0


def test_state_updates_must_extend_tips():
    enclave = installed()
    header1, delta1 = block_for(0, 1, ZERO_DIGEST, [genesis_tx(1)])
    enclave.update_state([header1], [delta1])

    with pytest.raises(RollbackError):
        enclave.update_state([header1], [delta1])
    header3, delta3 = block_for(0, 3, header1.digest(), [genesis_tx(2)])
    with pytest.raises(StateUpdateError):
        enclave.update_state([header3], [delta3])
    header2, _ = block_for(0, 2, header1.digest(), [genesis_tx(3)])
    with pytest.raises(StateUpdateError):
        enclave.update_state([header2], [UtxoDelta(((b"\x05" * 32, 1),), ())])
    with pytest.raises(StateUpdateError):
        enclave.update_state([block_for(9, 1, ZERO_DIGEST, [])[0]], [UtxoDelta((), ())])
    assert enclave.state_height == 1


def test_restart_recovers_sealed_state():
    platform, storage = Platform.from_seed(3), HostStorage()
    enclave = installed(storage, platform)
    prev = ZERO_DIGEST
    for height in range(1, 4):
        header, delta = block_for(1, height, prev, [genesis_tx(height)])
        enclave.update_state([header], [delta])
        prev = header.digest()
    key = enclave.public_key
    enclave.destroy()
    with pytest.raises(EnclaveError):
        enclave.resume(b"")

    restarted = installed(storage, platform)
    assert restarted.state_height == 3 and restarted.version == 3
    assert restarted.public_key == key
    placement = restarted.resume(encrypt_for_enclave(restarted.encryption_key, spend(genesis_tx(2))))
    assert placement.s_out == 1 and placement.st == 3


_stable_world = {}


def stable_enclave():
    """One installed enclave with three parents sealed in shard 2, shared by the property tests."""
    if not _stable_world:
        enclave = installed(name="stable")
        parents = [genesis_tx(40 + i) for i in range(3)]
        header, delta = block_for(2, 1, ZERO_DIGEST, parents)
        enclave.update_state([header], [delta])
        _stable_world.update(enclave=enclave, inputs=tuple(Outpoint(p.txid, 1) for p in parents[:2]))
    return _stable_world['enclave'], _stable_world['inputs']


def placed(enclave, tx):
    placement = enclave.resume(encrypt_for_enclave(enclave.encryption_key, tx))
    return placement.s_out, placement.st, placement.status


@settings(max_examples=150, deadline=None)
@given(st.lists(st.tuples(st.binary(min_size=1, max_size=20), st.integers(0, 2 ** 40)), min_size=1, max_size=5),
       st.binary(max_size=32))
def test_placement_ignores_outputs_and_nonce(outputs, nonce):
    enclave, inputs = stable_enclave()
    reference = placed(enclave, Transaction(inputs, (TxOutput(b"\x01" * 20, 1),)))
    assert placed(enclave, Transaction(inputs, tuple(TxOutput(a, v) for a, v in outputs), nonce)) == reference


@pytest.mark.slow
def test_ten_thousand_regrinds_keep_the_output_shard():
    enclave, inputs = stable_enclave()
    rng = random.Random(10)
    results, hash_shards = set(), set()
    for _ in range(10_000):
        tx = Transaction(inputs, (TxOutput(rng.randbytes(20), rng.randrange(1, 10 ** 6)),),
                         nonce_bytes=rng.randbytes(8))
        results.add(placed(enclave, tx))
        hash_shards.add(shard_of(tx.txid, SHARDS))
    assert results == {(2, 1, PlacementStatus.OK)}
    assert hash_shards == set(range(SHARDS))


def test_zero_input_stream_keeps_loads_even():
    loads = [0] * SHARDS
    for height in range(100_000):
        tx = Transaction((), (TxOutput(b"\x02" * 20, height),))
        loads[txsharding(tx, PlacementState(height, (), tuple(loads)))] += 1
    assert sum(loads) == 100_000
    assert max(loads) / min(loads) <= 1.05
    assert stats.chisquare(loads).pvalue > 0.01


def test_restarted_enclave_answers_identically():
    platform, storage = Platform.from_seed(8), HostStorage()
    enclave = installed(storage, platform)
    parents = [genesis_tx(i) for i in range(1, 4)]
    header, delta = block_for(3, 1, ZERO_DIGEST, parents)
    enclave.update_state([header], [delta])
    request = encrypt_for_enclave(enclave.encryption_key, spend(parents[0], parents[2]))
    before = enclave.resume(request)
    enclave.destroy()

    restarted = installed(storage, platform)
    after = restarted.resume(request)
    assert (after.s_out, after.st, after.status) == (before.s_out, before.st, before.status) == (3, 1, 0)
    assert after.encode() == before.encode()


def test_compacted_state_survives_restart():
    platform, storage = Platform.from_seed(4), HostStorage()
    enclave = installed(storage, platform)
    header, delta = block_for(3, 1, ZERO_DIGEST, [genesis_tx(1)])
    enclave.update_state([header], [delta])
    enclave.compact()
    header2, delta2 = block_for(3, 2, header.digest(), [genesis_tx(2)])
    enclave.update_state([header2], [delta2])
    assert len(storage.records("placement")) == 2

    restarted = installed(storage, platform)
    assert restarted.state_height == 2


def test_replayed_older_log_is_a_rollback():
    platform, storage = Platform.from_seed(5), HostStorage()
    enclave = installed(storage, platform)
    header, delta = block_for(0, 1, ZERO_DIGEST, [genesis_tx(1)])
    enclave.update_state([header], [delta])
    older = storage.records("placement")
    header2, delta2 = block_for(0, 2, header.digest(), [genesis_tx(2)])
    enclave.update_state([header2], [delta2])

    storage.replace("placement", older)
    with pytest.raises(RollbackError):
        installed(storage, platform)


def test_tampered_sealed_record_fails():
    platform, storage = Platform.from_seed(6), HostStorage()
    enclave = installed(storage, platform)
    header, delta = block_for(0, 1, ZERO_DIGEST, [genesis_tx(1)])
    enclave.update_state([header], [delta])
    record = bytearray(storage.records("placement")[0])
    record[-1] ^= 0x80
    storage.replace("placement", [bytes(record)])
    with pytest.raises(SealError):
        installed(storage, platform)


def test_file_storage_round_trip():
    platform = Platform.from_seed(7)
    with tempfile.TemporaryDirectory() as directory:
        enclave = installed(HostStorage(directory), platform)
        header, delta = block_for(2, 1, ZERO_DIGEST, [genesis_tx(1), genesis_tx(2)])
        enclave.update_state([header], [delta])
        restarted = installed(HostStorage(directory), platform)
        assert restarted.state_height == 1


def test_reinstall_other_program_is_refused():
    enclave = installed()
    assert enclave.install(ProgramDescriptor(SHARDS)) == enclave.identity
    with pytest.raises(EnclaveError):
        enclave.install(ProgramDescriptor(SHARDS + 1))


def test_measure_overhead_reports_sizes():
    result = measure_overhead(samples=20, shard_count=4)
    assert result['samples'] == 20
    assert result['resume_ms_mean'] > 0
    assert result['response_bytes'] > 64


def main():
    tests = [(name, func) for name, func in globals().items() if name.startswith("test_") and callable(func)]
    print("🧪 Testing enclave emulation...")
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
