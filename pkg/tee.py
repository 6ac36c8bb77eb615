"""
Emulated trusted execution environment for hash-independent placement.

The enclave boundary is the EnclaveInstance object: its signing key,
decryption key and unsealed state are only reachable through install(),
resume() and update_state(). Everything the host keeps (sealed state,
requests, responses) is bytes it may read, replay or tamper with.

Sealed state is an append-only log of AES-GCM records on HostStorage:

    u8 kind ('S' snapshot | 'U' update) | u64 version | 12-byte nonce | ciphertext

with associated data = program identity | kind | version. The platform keeps a
monotonic counter per sealed-state slot; a log whose last version differs
from the counter is a rollback.
"""

import hashlib
import json
import logging
import os
import struct
import threading
import time
from collections import Counter
from dataclasses import asdict, dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

import config
from core import (HEADER_SIZE, ZERO_DIGEST, BlockHeader, MalformedTransactionError, Outpoint,
                  PlacementState, Transaction, TxOutput, UtxoDelta, deserialize, serialize)
from debug_utils import global_debug_tracker
from hashshard import validate_shard_count

logger = logging.getLogger(__name__)

ATTESTATION_DOMAIN = b"TXSHARD-ATTEST-v1"
INGRESS_INFO = b"tx-ingress"
NONCE_SIZE = 12
KEY_SIZE = 32

_RECORD = struct.Struct("<cQ")
_ATTESTED = struct.Struct("<IQ32sB64sH")
_PAYLOAD = struct.Struct("<IQ32sB")
_LENGTH = struct.Struct("<I")


class EnclaveError(RuntimeError):
    """Raised when the enclave cannot serve a call."""


class SealError(EnclaveError):
    """Raised when sealed state cannot be authenticated or decrypted."""


class StateUpdateError(EnclaveError):
    """Raised for headers or deltas that do not extend the monitored chain."""


class RollbackError(StateUpdateError):
    """Raised for replayed headers or sealed state older than the platform counter."""


class PlacementStatus(IntEnum):
    OK = 0
    UNRESOLVED_INPUTS = 1


def least_loaded(loads: Sequence[int]) -> int:
    return min(range(len(loads)), key=lambda shard: (loads[shard], shard))


class BalancedInputPlacer:
    """
    Placement from inputs and loads only.

    Among the shards holding the transaction's inputs, pick the one leaving the
    fewest inputs cross-shard, then the lowest load, then the lowest id.
    Transactions without resolvable inputs go to the least-loaded shard. With
    load_slack, a best shard loaded above (1 + load_slack) times the mean is
    passed over for the least-loaded shard.
    """

    name = "balanced-input"
    needs_state = True

    def __init__(self, n: int, load_slack: Optional[float] = None):
        self.shard_count = validate_shard_count(n)
        if load_slack is not None and load_slack < 0:
            raise ValueError("load_slack must be >= 0")
        self.load_slack = load_slack

    def __call__(self, tx, state: Optional[PlacementState] = None) -> int:
        if state is None:
            raise ValueError("BalancedInputPlacer needs a placement state")
        loads = state.loads if state.loads else (0,) * self.shard_count
        held = Counter(shard for _, shard in state.inputs if shard is not None)
        if not held:
            return least_loaded(loads)
        total = sum(held.values())
        best = min(held, key=lambda shard: (total - held[shard], loads[shard], shard))
        if self.load_slack is not None:
            mean = sum(loads) / len(loads)
            if loads[best] > (1 + self.load_slack) * mean:
                return least_loaded(loads)
        return best

    def __repr__(self) -> str:
        return f"BalancedInputPlacer(n={self.shard_count}, load_slack={self.load_slack})"


def txsharding(tx, state: PlacementState, load_slack: Optional[float] = None) -> int:
    """Default placement function S_out = txsharding(tx, st)."""
    return BalancedInputPlacer(state.shard_count, load_slack)(tx, state)


@dataclass(frozen=True)
class ProgramDescriptor:
    """The enclave program; its identity is the digest of the canonical JSON form."""

    shard_count: int
    placer: str = "balanced-input"
    load_slack: Optional[float] = None
    version: str = "1"

    def canonical(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()

    @property
    def identity(self) -> bytes:
        return hashlib.sha256(self.canonical()).digest()

    def build_placer(self) -> BalancedInputPlacer:
        if self.placer != "balanced-input":
            raise EnclaveError(f"Unknown placer {self.placer!r}")
        return BalancedInputPlacer(self.shard_count, self.load_slack)


@dataclass(frozen=True)
class AttestedPlacement:
    """Enclave output (S_out, st, h_tx, status) with its signature sigma."""

    s_out: int
    st: int
    h_tx: bytes
    status: int
    sigma: bytes
    enclave_id: str = ""

    def encode(self) -> bytes:
        name = self.enclave_id.encode()
        return _ATTESTED.pack(self.s_out, self.st, self.h_tx, self.status, self.sigma, len(name)) + name

    @classmethod
    def decode(cls, data: bytes) -> "AttestedPlacement":
        if len(data) < _ATTESTED.size:
            raise MalformedTransactionError("Attested placement is truncated")
        s_out, st, h_tx, status, sigma, name_len = _ATTESTED.unpack_from(data)
        name = data[_ATTESTED.size:]
        if len(name) != name_len:
            raise MalformedTransactionError("Attested placement has a bad enclave id length")
        return cls(s_out, st, h_tx, status, sigma, name.decode(errors="replace"))


def attestation_payload(identity: bytes, s_out: int, st: int, h_tx: bytes, status: int) -> bytes:
    """Bytes signed by the enclave: domain | program identity | (S_out, st, h_tx, status)."""
    return ATTESTATION_DOMAIN + identity + _PAYLOAD.pack(s_out, st, h_tx, status)


def verify_attestation(public_key: bytes, identity: bytes, placement: AttestedPlacement) -> bool:
    """Check sigma under the enclave public key (raw Ed25519 bytes)."""
    try:
        key = ed25519.Ed25519PublicKey.from_public_bytes(public_key)
        key.verify(placement.sigma, attestation_payload(identity, placement.s_out, placement.st,
                                                         placement.h_tx, placement.status))
        return True
    except (InvalidSignature, ValueError, struct.error):
        return False


def _ingress_key(shared: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=None, info=INGRESS_INFO).derive(shared)


def encrypt_for_enclave(encryption_key: bytes, tx: Transaction) -> bytes:
    """
    ENC_pk(tx): ephemeral X25519 key agreement with the enclave key, then AES-GCM.

    Layout: 32-byte ephemeral public key | 12-byte nonce | ciphertext.
    """
    ephemeral = x25519.X25519PrivateKey.generate()
    shared = ephemeral.exchange(x25519.X25519PublicKey.from_public_bytes(encryption_key))
    eph_pub = ephemeral.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
    nonce = os.urandom(NONCE_SIZE)
    return eph_pub + nonce + AESGCM(_ingress_key(shared)).encrypt(nonce, serialize(tx), eph_pub)


class Platform:
    """TEE-capable host CPU: platform secret, key derivation, monotonic counters."""

    def __init__(self, secret: Optional[bytes] = None):
        self._secret = secret if secret is not None else os.urandom(KEY_SIZE)
        self._counters: Dict[str, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_seed(cls, seed: int) -> "Platform":
        return cls(hashlib.sha256(b"platform" + seed.to_bytes(8, "little")).digest())

    def derive_key(self, label: bytes) -> bytes:
        return HKDF(algorithm=hashes.SHA256(), length=KEY_SIZE, salt=None, info=label).derive(self._secret)

    def counter(self, slot: str) -> int:
        with self._lock:
            return self._counters.get(slot, 0)

    def increment_counter(self, slot: str) -> int:
        with self._lock:
            self._counters[slot] = self._counters.get(slot, 0) + 1
            return self._counters[slot]


class HostStorage:
    """Untrusted storage of sealed records, in memory or under a directory."""

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory
        self._slots: Dict[str, List[bytes]] = {}
        if directory:
            os.makedirs(directory, exist_ok=True)

    def _path(self, slot: str) -> str:
        return os.path.join(self.directory, f"{slot}.sealed")

    def records(self, slot: str) -> List[bytes]:
        if not self.directory:
            return list(self._slots.get(slot, []))
        try:
            with open(self._path(slot), "rb") as handle:
                data = handle.read()
        except FileNotFoundError:
            return []
        records, pos = [], 0
        while pos < len(data):
            if pos + _LENGTH.size > len(data):
                raise SealError(f"Sealed file for {slot} is truncated")
            (size,) = _LENGTH.unpack_from(data, pos)
            pos += _LENGTH.size
            records.append(data[pos:pos + size])
            pos += size
        return records

    def append(self, slot: str, record: bytes) -> None:
        if not self.directory:
            self._slots.setdefault(slot, []).append(record)
            return
        with open(self._path(slot), "ab") as handle:
            handle.write(_LENGTH.pack(len(record)) + record)

    def replace(self, slot: str, records: Sequence[bytes]) -> None:
        if not self.directory:
            self._slots[slot] = list(records)
            return
        with open(self._path(slot), "wb") as handle:
            for record in records:
                handle.write(_LENGTH.pack(len(record)) + record)


class EnclaveState:
    """Monitored chain view: output placement per txid, shard tips, loads, st."""

    def __init__(self, shard_count: int):
        self.shard_count = shard_count
        self.st = 0
        self.tips: List[Tuple[int, bytes]] = [(0, ZERO_DIGEST)] * shard_count
        self.loads: List[int] = [0] * shard_count
        self.outputs: Dict[bytes, Tuple[int, int]] = {}

    def locate(self, outpoint: Outpoint) -> Optional[int]:
        record = self.outputs.get(outpoint.txid)
        return record[0] if record is not None else None

    def check(self, headers: Sequence[BlockHeader], deltas: Sequence[UtxoDelta]) -> None:
        """Raise unless headers/deltas extend the current tips in order."""
        if len(headers) != len(deltas):
            raise StateUpdateError(f"{len(headers)} headers but {len(deltas)} deltas")
        tips = list(self.tips)
        for header, delta in zip(headers, deltas):
            if not 0 <= header.shard < self.shard_count:
                raise StateUpdateError(f"Header for unknown shard {header.shard}")
            height, digest = tips[header.shard]
            if header.height <= height:
                raise RollbackError(f"Shard {header.shard} header {header.height} replays height {height}")
            if header.height != height + 1 or header.prev_digest != digest:
                raise StateUpdateError(f"Shard {header.shard} header {header.height} does not extend tip {height}")
            if delta.digest() != header.delta_digest:
                raise StateUpdateError(f"Delta does not match header {header.shard}/{header.height}")
            tips[header.shard] = (header.height, header.digest())

    def apply(self, headers: Sequence[BlockHeader], deltas: Sequence[UtxoDelta]) -> None:
        for header, delta in zip(headers, deltas):
            for txid, count in delta.created:
                self.outputs[txid] = (header.shard, count)
            self.loads[header.shard] += len(delta.created)
            self.tips[header.shard] = (header.height, header.digest())
            self.st += 1

    def snapshot(self) -> bytes:
        return json.dumps({
            'shard_count': self.shard_count,
            'st': self.st,
            'tips': [[height, digest.hex()] for height, digest in self.tips],
            'loads': self.loads,
            'outputs': {txid.hex(): list(record) for txid, record in self.outputs.items()},
        }, sort_keys=True).encode()

    @classmethod
    def from_snapshot(cls, data: bytes) -> "EnclaveState":
        raw = json.loads(data)
        state = cls(raw['shard_count'])
        state.st = raw['st']
        state.tips = [(height, bytes.fromhex(digest)) for height, digest in raw['tips']]
        state.loads = list(raw['loads'])
        state.outputs = {bytes.fromhex(txid): (shard, count) for txid, (shard, count) in raw['outputs'].items()}
        return state


def encode_updates(headers: Sequence[BlockHeader], deltas: Sequence[UtxoDelta]) -> bytes:
    parts = [_LENGTH.pack(len(headers))]
    for header, delta in zip(headers, deltas):
        encoded = delta.encode()
        parts.append(header.encode() + _LENGTH.pack(len(encoded)) + encoded)
    return b"".join(parts)


def decode_updates(data: bytes) -> Tuple[List[BlockHeader], List[UtxoDelta]]:
    (count,) = _LENGTH.unpack_from(data)
    pos = _LENGTH.size
    headers, deltas = [], []
    for _ in range(count):
        headers.append(BlockHeader.decode(data[pos:pos + HEADER_SIZE]))
        pos += HEADER_SIZE
        (size,) = _LENGTH.unpack_from(data, pos)
        pos += _LENGTH.size
        deltas.append(UtxoDelta.decode(data[pos:pos + size]))
        pos += size
    return headers, deltas


class EnclaveInstance:
    """
    One enclave on a platform.

    Keys derive from the platform secret and the enclave name, so an enclave
    restarted under the same name holds the same keys. The sealing key derives
    from the program identity; instances running the same program on one
    platform can share a sealed-state slot.
    """

    def __init__(self, platform: Platform, storage: HostStorage, name: str = "placement",
                 slot: Optional[str] = None):
        self.name = name
        self.slot = slot or name
        self._platform = platform
        self._storage = storage
        self._sign_key = ed25519.Ed25519PrivateKey.from_private_bytes(
            platform.derive_key(b"sign:" + name.encode()))
        self._kem_key = x25519.X25519PrivateKey.from_private_bytes(
            platform.derive_key(b"kem:" + name.encode()))
        self._program: Optional[ProgramDescriptor] = None
        self._identity = b""
        self._placer: Optional[BalancedInputPlacer] = None
        self._seal_key: Optional[bytes] = None
        self._state: Optional[EnclaveState] = None
        self._version = 0
        self._lock = threading.RLock()
        self.alive = True

    @property
    def public_key(self) -> bytes:
        return self._sign_key.public_key().public_bytes(serialization.Encoding.Raw,
                                                        serialization.PublicFormat.Raw)

    @property
    def encryption_key(self) -> bytes:
        return self._kem_key.public_key().public_bytes(serialization.Encoding.Raw,
                                                       serialization.PublicFormat.Raw)

    @property
    def identity(self) -> bytes:
        return self._identity

    @property
    def installed(self) -> bool:
        return self._program is not None

    @property
    def state_height(self) -> int:
        with self._lock:
            return self._state.st if self._state is not None else 0

    @property
    def version(self) -> int:
        return self._version

    def _require_alive(self) -> None:
        if not self.alive:
            raise EnclaveError(f"Enclave {self.name} has been destroyed")

    def install(self, program: ProgramDescriptor) -> bytes:
        """
        Store the program once and unseal its state; returns the program identity.

        Raises:
            EnclaveError: if a different program is already installed
            SealError / RollbackError: if the sealed state is tampered or stale
        """
        with self._lock:
            self._require_alive()
            if self._program is not None:
                if self._program != program:
                    raise EnclaveError(f"Enclave {self.name} already runs another program")
                return self._identity
            self._program = program
            self._identity = program.identity
            self._placer = program.build_placer()
            self._seal_key = self._platform.derive_key(b"seal:" + self._identity)
            self._state = EnclaveState(program.shard_count)
            self._version = 0
            try:
                self._refresh()
            except EnclaveError:
                self._program = None
                self._state = None
                raise
        logger.info(f"Enclave {self.name} installed program {self._identity.hex()[:16]} at st={self._state.st}")
        return self._identity

    def _aad(self, kind: bytes, version: int) -> bytes:
        return self._identity + _RECORD.pack(kind, version)

    def _seal(self, kind: bytes, version: int, payload: bytes) -> bytes:
        nonce = os.urandom(NONCE_SIZE)
        return _RECORD.pack(kind, version) + nonce + AESGCM(self._seal_key).encrypt(
            nonce, payload, self._aad(kind, version))

    def _unseal(self, record: bytes) -> Tuple[bytes, int, bytes]:
        if len(record) < _RECORD.size + NONCE_SIZE:
            raise SealError("Sealed record is truncated")
        kind, version = _RECORD.unpack_from(record)
        nonce = record[_RECORD.size:_RECORD.size + NONCE_SIZE]
        try:
            payload = AESGCM(self._seal_key).decrypt(nonce, record[_RECORD.size + NONCE_SIZE:],
                                                     self._aad(kind, version))
        except InvalidTag:
            raise SealError(f"Sealed record at version {version} failed authentication")
        return kind, version, payload

    def _refresh(self) -> None:
        """Apply sealed records newer than the local version; check against the counter."""
        expected = self._platform.counter(self.slot)
        if expected == self._version:
            return
        records = self._storage.records(self.slot)
        version = self._version
        for record in records:
            kind, record_version, payload = self._unseal(record)
            if record_version <= version and kind != b"S":
                continue
            if kind == b"S":
                if record_version < version:
                    continue
                self._state = EnclaveState.from_snapshot(payload)
            elif record_version != version + 1:
                raise RollbackError(f"Sealed log skips from version {version} to {record_version}")
            else:
                headers, deltas = decode_updates(payload)
                self._state.check(headers, deltas)
                self._state.apply(headers, deltas)
            version = record_version
        if version != expected:
            raise RollbackError(f"Sealed state is at version {version}, platform counter is {expected}")
        self._version = version

    def _decrypt(self, inp_c: bytes) -> bytes:
        eph_pub, nonce, body = inp_c[:KEY_SIZE], inp_c[KEY_SIZE:KEY_SIZE + NONCE_SIZE], inp_c[KEY_SIZE + NONCE_SIZE:]
        shared = self._kem_key.exchange(x25519.X25519PublicKey.from_public_bytes(eph_pub))
        return AESGCM(_ingress_key(shared)).decrypt(nonce, body, eph_pub)

    def resume(self, inp_c: bytes) -> Optional[AttestedPlacement]:
        """
        Run the placement program on an encrypted transaction.

        Returns:
            The signed placement, or None (bottom) when no program is installed
            or inp_c does not decrypt to a transaction
        """
        start = time.perf_counter()
        with self._lock:
            self._require_alive()
            if self._program is None:
                logger.warning(f"resume on {self.name} before install")
                return None
            try:
                tx = deserialize(self._decrypt(inp_c))
            except (InvalidTag, ValueError, MalformedTransactionError):
                logger.warning(f"Enclave {self.name} could not decrypt a request")
                global_debug_tracker.track_enclave_call(self.name, "resume", 0.0, len(inp_c), ok=False)
                return None
            self._refresh()
            state = PlacementState(
                height=self._state.st,
                inputs=tuple((op, self._state.locate(op)) for op in tx.inputs),
                loads=tuple(self._state.loads),
            )

        status = PlacementStatus.OK if state.resolved else PlacementStatus.UNRESOLVED_INPUTS
        s_out = self._placer(tx, state)
        h_tx = tx.txid
        sigma = self._sign_key.sign(attestation_payload(self._identity, s_out, state.height, h_tx, status))
        placement = AttestedPlacement(s_out, state.height, h_tx, int(status), sigma, self.name)
        global_debug_tracker.track_enclave_call(self.name, "resume", (time.perf_counter() - start) * 1000,
                                                len(inp_c))
        return placement

    def update_state(self, headers: Sequence[BlockHeader], deltas: Sequence[UtxoDelta]) -> int:
        """
        Advance the monitored state by new block headers and their deltas.

        Returns:
            The new state height st

        Raises:
            RollbackError: for headers at or below the current tip
            StateUpdateError: for gaps, foreign parents or mismatching deltas
        """
        start = time.perf_counter()
        with self._lock:
            self._require_alive()
            if self._program is None:
                raise EnclaveError(f"update_state on {self.name} before install")
            self._refresh()
            if not headers and not deltas:
                return self._state.st
            try:
                self._state.check(headers, deltas)
            except StateUpdateError as e:
                logger.warning(f"Enclave {self.name} rejected a state update: {str(e)}")
                raise
            payload = encode_updates(headers, deltas)
            record = self._seal(b"U", self._version + 1, payload)
            self._storage.append(self.slot, record)
            self._version = self._platform.increment_counter(self.slot)
            self._state.apply(headers, deltas)
            st = self._state.st
        global_debug_tracker.track_enclave_call(self.name, "update_state", (time.perf_counter() - start) * 1000,
                                                len(payload))
        return st

    def compact(self) -> None:
        """Fold the sealed log into one snapshot record at the current version."""
        with self._lock:
            self._require_alive()
            if self._program is None:
                raise EnclaveError(f"compact on {self.name} before install")
            self._refresh()
            self._storage.replace(self.slot, [self._seal(b"S", self._version, self._state.snapshot())])

    def destroy(self) -> None:
        """Kill the enclave; keys and unsealed state are gone with it."""
        with self._lock:
            self.alive = False
            self._state = None
            self._program = None
        logger.info(f"Enclave {self.name} destroyed")


def measure_overhead(samples: int = 200, shard_count: int = config.DEFAULT_SHARDS,
                     seed: int = 0) -> Dict[str, float]:
    """
    Time resume() on random spends of genesis outputs.

    Returns:
        resume latency statistics (ms) and request/response sizes (bytes)
    """
    platform = Platform.from_seed(seed)
    enclave = EnclaveInstance(platform, HostStorage(), "overhead")
    enclave.install(ProgramDescriptor(shard_count))
    rng = np.random.default_rng(seed)

    genesis = [Transaction((), (TxOutput(rng.bytes(config.ADDRESS_BYTES), 50_000),) * 4,
                           nonce_bytes=i.to_bytes(4, "little")) for i in range(shard_count * 4)]
    tips = [(0, ZERO_DIGEST)] * shard_count
    headers, deltas = [], []
    for shard in range(shard_count):
        delta = UtxoDelta(tuple((tx.txid, tx.output_count) for tx in genesis[shard::shard_count]), ())
        header = BlockHeader(shard, 1, tips[shard][1], delta.digest(), len(delta.created), 0)
        headers.append(header)
        deltas.append(delta)
    enclave.update_state(headers, deltas)

    timings, responses, requests = [], [], []
    for _ in range(samples):
        parents = rng.choice(len(genesis), size=2, replace=False).tolist()
        inputs = tuple(Outpoint(genesis[p].txid, int(rng.integers(4))) for p in parents)
        tx = Transaction(inputs, (TxOutput(rng.bytes(config.ADDRESS_BYTES), 1000),),
                         nonce_bytes=rng.bytes(8))
        request = encrypt_for_enclave(enclave.encryption_key, tx)
        start = time.perf_counter()
        placement = enclave.resume(request)
        timings.append((time.perf_counter() - start) * 1000)
        responses.append(len(placement.encode()))
        requests.append(len(request))

    result = {
        'samples': samples,
        'resume_ms_mean': float(np.mean(timings)),
        'resume_ms_p95': float(np.percentile(timings, 95)),
        'response_bytes': float(max(responses)),
        'request_bytes': float(np.mean(requests)),
    }
    logger.info(f"resume: {result['resume_ms_mean']:.3f} ms mean, {result['response_bytes']:.0f} byte responses")
    return result
