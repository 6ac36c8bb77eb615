"""
Client and validator protocols of the TEE countermeasure, the ideal
blockchain they write to, and the ideal countermeasure used as a test oracle.

Wire messages (integers little-endian):

    request   u8 type=1 | u32 len | inp_c
    response  u8 type=2 | attested placement
              (u32 S_out | u64 st | 32-byte h_tx | u8 status | 64-byte sigma | u16 id_len | enclave id)
    process   u8 type=3 | u32 S_out | u64 st | u8 status | 64-byte sigma | u16 id_len | enclave id
              | u32 len | canonical transaction bytes
"""

import logging
import random
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple, Union

import config
from core import (DoubleSpendError, MalformedTransactionError, MissingOutpointError, Outpoint, Transaction,
                  TxOutput, deserialize, serialize)
from shardsim import ShardedChainState
from tee import (AttestedPlacement, BalancedInputPlacer, EnclaveError, EnclaveInstance, HostStorage,
                 Platform, PlacementStatus, ProgramDescriptor, encrypt_for_enclave, verify_attestation)

logger = logging.getLogger(__name__)

ADVERSARIES = ("none", "drop", "tamper-sout", "forge-sig", "substitute-tx", "stale-state", "kill-enclave",
               "bit-flip")

_TYPE = struct.Struct("<B")
_LEN = struct.Struct("<I")
_PROCESS_HEAD = struct.Struct("<IQB64sH")


class ProtocolMessageError(ValueError):
    """Raised for bytes that do not decode to a protocol message."""


class Verdict(str, Enum):
    ACCEPT = "accept"
    REJECT = "reject"
    BOTTOM = "bottom"


class MessageType(IntEnum):
    REQUEST = 1
    RESPONSE = 2
    PROCESS = 3


@dataclass(frozen=True)
class RequestMessage:
    inp_c: bytes

    def encode(self) -> bytes:
        return _TYPE.pack(MessageType.REQUEST) + _LEN.pack(len(self.inp_c)) + self.inp_c


@dataclass(frozen=True)
class ResponseMessage:
    placement: AttestedPlacement

    def encode(self) -> bytes:
        return _TYPE.pack(MessageType.RESPONSE) + self.placement.encode()


@dataclass(frozen=True)
class ProcessMessage:
    s_out: int
    st: int
    status: int
    sigma: bytes
    enclave_id: str
    tx: Transaction

    @classmethod
    def from_placement(cls, placement: AttestedPlacement, tx: Transaction) -> "ProcessMessage":
        return cls(placement.s_out, placement.st, placement.status, placement.sigma, placement.enclave_id, tx)

    def placement(self) -> AttestedPlacement:
        """The attested placement this message claims, with h_tx taken from the carried tx."""
        return AttestedPlacement(self.s_out, self.st, self.tx.txid, self.status, self.sigma, self.enclave_id)

    def encode(self) -> bytes:
        name = self.enclave_id.encode()
        raw = serialize(self.tx)
        return (_TYPE.pack(MessageType.PROCESS)
                + _PROCESS_HEAD.pack(self.s_out, self.st, self.status, self.sigma, len(name)) + name
                + _LEN.pack(len(raw)) + raw)


Message = Union[RequestMessage, ResponseMessage, ProcessMessage]


def decode_message(data: bytes) -> Message:
    """
    Parse a wire message.

    Raises:
        ProtocolMessageError: on unknown types, bad lengths or bad payloads
    """
    try:
        if not data:
            raise ProtocolMessageError("Empty message")
        kind = data[0]
        body = data[1:]
        if kind == MessageType.REQUEST:
            (size,) = _LEN.unpack_from(body)
            if len(body) != _LEN.size + size:
                raise ProtocolMessageError("Request length does not match its payload")
            return RequestMessage(body[_LEN.size:])
        if kind == MessageType.RESPONSE:
            return ResponseMessage(AttestedPlacement.decode(body))
        if kind == MessageType.PROCESS:
            s_out, st, status, sigma, name_len = _PROCESS_HEAD.unpack_from(body)
            pos = _PROCESS_HEAD.size
            name = body[pos:pos + name_len]
            pos += name_len
            (size,) = _LEN.unpack_from(body, pos)
            pos += _LEN.size
            if len(body) != pos + size or len(name) != name_len:
                raise ProtocolMessageError("Process message length does not match its payload")
            tx = deserialize(body[pos:])
            return ProcessMessage(s_out, st, status, sigma, name.decode(errors="replace"), tx)
    except (struct.error, MalformedTransactionError, UnicodeDecodeError) as e:
        raise ProtocolMessageError(f"Cannot decode message: {str(e)}")
    raise ProtocolMessageError(f"Unknown message type {kind}")


@dataclass(frozen=True)
class EnclaveKeys:
    public_key: bytes
    encryption_key: bytes


class AttestationVerifier:
    """
    Acceptance rule for an attested placement of tx into a shard: known enclave,
    h_tx = H(tx), status ok, S_out = shard, valid sigma and st within the
    freshness window of the current height.
    """

    def __init__(self, identity: bytes, registry: Dict[str, EnclaveKeys], freshness_window: int,
                 height: Callable[[], int]):
        self.identity = identity
        self.registry = registry
        self.freshness_window = freshness_window
        self._height = height

    def check(self, shard: int, tx: Transaction, placement: AttestedPlacement) -> Optional[str]:
        """Return None when the placement is acceptable, else the reason it is not."""
        keys = self.registry.get(placement.enclave_id)
        if keys is None:
            return "unknown enclave"
        if placement.h_tx != tx.txid:
            return "h_tx does not match the transaction"
        if placement.status != PlacementStatus.OK:
            return "placement reports unresolved inputs"
        if placement.s_out != shard:
            return "S_out does not match the target shard"
        if not verify_attestation(keys.public_key, self.identity, placement):
            return "invalid signature"
        height = self._height()
        if placement.st > height or height - placement.st > self.freshness_window:
            return f"stale state st={placement.st} at height {height}"
        return None


class IdealBlockchain:
    """
    Ledger functionality: DB_i maps h_tx -> tx per shard, append-only.

    write() accepts iff the transaction validates against the UTXO state and,
    when a verifier is set, its attested placement targets this shard.
    """

    def __init__(self, n: int, verifier: Optional[AttestationVerifier] = None):
        self.chain = ShardedChainState(n, keep_journal=True)
        self.db: List[Dict[bytes, Transaction]] = [{} for _ in range(n)]
        self.verifier = verifier
        self._lock = threading.RLock()

    @property
    def shard_count(self) -> int:
        return self.chain.shard_count

    @property
    def height(self) -> int:
        return self.chain.height

    def seal_genesis(self, txs: Sequence[Transaction], placer: BalancedInputPlacer) -> List[int]:
        """Place zero-input genesis transactions and seal one block per shard."""
        with self._lock:
            return seal_genesis(self.chain, self.db, txs, placer)

    def write(self, shard: int, tx: Transaction, placement: Optional[AttestedPlacement] = None) -> Verdict:
        with self._lock:
            if not 0 <= shard < self.shard_count:
                return Verdict.REJECT
            if self.verifier is not None:
                reason = "missing attestation" if placement is None else self.verifier.check(shard, tx, placement)
                if reason is not None:
                    logger.warning(f"Blockchain refused {tx.txid.hex()[:16]} for shard {shard}: {reason}")
                    return Verdict.REJECT
            try:
                self.chain.validate(tx)
            except (MissingOutpointError, DoubleSpendError) as e:
                logger.info(f"Blockchain rejected {tx.txid.hex()[:16]}: {str(e)}")
                return Verdict.REJECT
            self.chain.commit_block(shard, [tx], self.chain.height)
            self.db[shard][tx.txid] = tx
            return Verdict.ACCEPT

    def read(self, shard: int, h_tx: bytes) -> Optional[Transaction]:
        if not 0 <= shard < self.shard_count:
            return None
        return self.db[shard].get(h_tx)

    def contents(self) -> Tuple[frozenset, ...]:
        return tuple(frozenset(entries) for entries in self.db)


def seal_genesis(chain: ShardedChainState, db: List[Dict[bytes, Transaction]], txs: Sequence[Transaction],
                 placer: BalancedInputPlacer) -> List[int]:
    groups: Dict[int, List[Transaction]] = {}
    loads = [0] * chain.shard_count
    shards = []
    for tx in txs:
        shard = placer(tx, chain.placement_state(tx.inputs, loads))
        loads[shard] += 1
        groups.setdefault(shard, []).append(tx)
        shards.append(shard)
    for shard in sorted(groups):
        chain.commit_block(shard, groups[shard], chain.height)
        for tx in groups[shard]:
            db[shard][tx.txid] = tx
    return shards


class IdealCountermeasure:
    """
    Trusted reference: places each tx with txsharding on the current state and
    appends it to DB_{S_out}. Same newtx/read interface as the real protocol.
    """

    def __init__(self, n: int, genesis: Sequence[Transaction] = (), load_slack: Optional[float] = None):
        self.chain = ShardedChainState(n)
        self.db: List[Dict[bytes, Transaction]] = [{} for _ in range(n)]
        self.placer = BalancedInputPlacer(n, load_slack)
        if genesis:
            seal_genesis(self.chain, self.db, genesis, self.placer)

    def newtx(self, tx: Transaction) -> Verdict:
        try:
            self.chain.validate(tx)
        except (MissingOutpointError, DoubleSpendError):
            return Verdict.REJECT
        s_out = self.placer(tx, self.chain.placement_state(tx.inputs))
        self.chain.commit_block(s_out, [tx], self.chain.height)
        self.db[s_out][tx.txid] = tx
        return Verdict.ACCEPT

    def read(self, shard: int, h_tx: bytes) -> Optional[Transaction]:
        if not 0 <= shard < len(self.db):
            return None
        return self.db[shard].get(h_tx)

    def placement_of(self, txid: bytes) -> Optional[int]:
        return self.chain.placement.get(txid)

    def contents(self) -> Tuple[frozenset, ...]:
        return tuple(frozenset(entries) for entries in self.db)


class Validator:
    """A validator node; TEE-enabled when it hosts an enclave."""

    def __init__(self, node_id: int, blockchain: IdealBlockchain, verifier: AttestationVerifier,
                 program: Optional[ProgramDescriptor] = None, platform: Optional[Platform] = None,
                 storage: Optional[HostStorage] = None, compact_every: int = 256):
        self.node_id = node_id
        self.blockchain = blockchain
        self.verifier = verifier
        self.program = program
        self.platform = platform
        self.storage = storage
        self.enclave_name = f"validator-{node_id}"
        self.compact_every = compact_every
        self.behavior = "honest"
        self.enclave: Optional[EnclaveInstance] = None
        self._requests = 0
        if program is not None:
            self.platform = platform or Platform()
            self.storage = storage or HostStorage()
            self.restart_enclave()

    @property
    def tee_enabled(self) -> bool:
        return self.enclave is not None

    def keys(self) -> EnclaveKeys:
        return EnclaveKeys(self.enclave.public_key, self.enclave.encryption_key)

    def restart_enclave(self) -> None:
        """Start (or restart) the enclave and unseal its state from host storage."""
        self.enclave = EnclaveInstance(self.platform, self.storage, self.enclave_name)
        self.enclave.install(self.program)
        self.sync_enclave()

    def kill_enclave(self) -> None:
        if self.enclave is not None:
            self.enclave.destroy()

    def sync_enclave(self) -> int:
        """Feed the enclave every block sealed since its state height."""
        history = self.blockchain.chain.history_since(self.enclave.state_height)
        if history:
            headers = [header for header, _ in history]
            deltas = [delta for _, delta in history]
            self.enclave.update_state(headers, deltas)
            if self.enclave.version % self.compact_every == 0:
                self.enclave.compact()
        return self.enclave.state_height

    def request(self, inp_c: bytes) -> Optional[AttestedPlacement]:
        """
        Relay resume(inp_c) to the enclave.

        Returns None (no response) without a TEE, and bottom (None) when the
        enclave refuses the input.
        """
        if not self.tee_enabled:
            logger.debug(f"Validator {self.node_id} has no TEE and discards the request")
            return None
        self._requests += 1
        if not self.enclave.alive:
            self.restart_enclave()
        if self.behavior != "stale-state" or self._requests % 5 == 0:
            self.sync_enclave()
        return self.enclave.resume(inp_c)

    def process(self, s_out: int, placement: AttestedPlacement, tx: Transaction) -> Verdict:
        """Verify the attested placement, then write tx to shard s_out."""
        reason = self.verifier.check(s_out, tx, placement)
        if reason is not None:
            logger.info(f"Validator {self.node_id} refused {tx.txid.hex()[:16]}: {reason}")
            return Verdict.BOTTOM
        return self.blockchain.write(s_out, tx, placement)

    def handle_request(self, data: bytes) -> Optional[bytes]:
        try:
            message = decode_message(data)
        except ProtocolMessageError as e:
            logger.warning(f"Validator {self.node_id} dropped a malformed request: {str(e)}")
            return None
        if not isinstance(message, RequestMessage):
            return None
        try:
            placement = self.request(message.inp_c)
        except EnclaveError as e:
            logger.warning(f"Validator {self.node_id} enclave failure: {str(e)}")
            return None
        return ResponseMessage(placement).encode() if placement is not None else None

    def handle_process(self, data: bytes) -> Verdict:
        try:
            message = decode_message(data)
        except ProtocolMessageError as e:
            logger.warning(f"Validator {self.node_id} refused a malformed process message: {str(e)}")
            return Verdict.BOTTOM
        if not isinstance(message, ProcessMessage):
            return Verdict.BOTTOM
        return self.process(message.s_out, message.placement(), message.tx)


class Transport:
    """Delivers encoded messages between clients and validators."""

    def request(self, validator: Validator, data: bytes) -> Optional[bytes]:
        return validator.handle_request(data)

    def process(self, validator: Validator, data: bytes) -> Optional[Verdict]:
        return validator.handle_process(data)


def flip_bit(data: bytes, rng: random.Random) -> bytes:
    position = rng.randrange(len(data) * 8)
    mutated = bytearray(data)
    mutated[position // 8] ^= 1 << (position % 8)
    return bytes(mutated)


class AdversarialTransport(Transport):
    """Transport that drops or mutates traffic of corrupted validators."""

    def __init__(self, policy: str, corrupted: Set[int], shard_count: int, rng: random.Random):
        if policy not in ADVERSARIES:
            raise ValueError(f"Unknown adversary {policy!r}")
        self.policy = policy
        self.corrupted = corrupted
        self.shard_count = shard_count
        self.rng = rng
        self.mutations = 0

    def request(self, validator: Validator, data: bytes) -> Optional[bytes]:
        response = super().request(validator, data)
        if response is None or validator.node_id not in self.corrupted:
            return response
        if self.policy == "drop":
            return None
        if self.policy in ("tamper-sout", "forge-sig"):
            placement = decode_message(response).placement
            if self.policy == "tamper-sout":
                placement = AttestedPlacement((placement.s_out + 1) % self.shard_count, placement.st,
                                              placement.h_tx, placement.status, placement.sigma,
                                              placement.enclave_id)
            else:
                placement = AttestedPlacement(placement.s_out, placement.st, placement.h_tx, placement.status,
                                              self.rng.randbytes(64), placement.enclave_id)
            self.mutations += 1
            return ResponseMessage(placement).encode()
        if self.policy == "bit-flip":
            self.mutations += 1
            return flip_bit(response, self.rng)
        return response

    def process(self, validator: Validator, data: bytes) -> Optional[Verdict]:
        if validator.node_id in self.corrupted:
            if self.policy == "drop":
                return None
            if self.policy == "bit-flip":
                self.mutations += 1
                data = flip_bit(data, self.rng)
        return super().process(validator, data)


class ClientSession:
    """
    Client side of the countermeasure: encrypt, query up to query_limit
    validators, keep responses whose h_tx and sigma check out, and submit the
    freshest one for processing.
    """

    def __init__(self, client_id: int, validators: Sequence[Validator], registry: Dict[str, EnclaveKeys],
                 identity: bytes, shard_count: int, blockchain: IdealBlockchain,
                 query_limit: int = config.CLIENT_QUERY_LIMIT, transport: Optional[Transport] = None,
                 rng: Optional[random.Random] = None):
        self.client_id = client_id
        self.validators = list(validators)
        self.registry = registry
        self.identity = identity
        self.shard_count = shard_count
        self.blockchain = blockchain
        self.query_limit = query_limit
        self.transport = transport or Transport()
        self.rng = rng or random.Random(client_id)
        self.rejected_responses = 0
        self.last_request: Optional[Tuple[Validator, bytes]] = None

    def _valid(self, tx: Transaction, validator: Validator, placement: AttestedPlacement) -> bool:
        if placement.h_tx != tx.txid:
            logger.info(f"Client {self.client_id}: validator {validator.node_id} answered for another tx")
            return False
        keys = self.registry.get(placement.enclave_id)
        if keys is None or placement.enclave_id != validator.enclave_name:
            return False
        if placement.status != PlacementStatus.OK or not 0 <= placement.s_out < self.shard_count:
            return False
        return verify_attestation(keys.public_key, self.identity, placement)

    def query(self, tx: Transaction) -> List[Tuple[AttestedPlacement, Validator]]:
        """Verified responses from up to query_limit validators, freshest first."""
        candidates = self.rng.sample(self.validators, min(self.query_limit, len(self.validators)))
        responses = []
        for validator in candidates:
            keys = self.registry.get(validator.enclave_name)
            if keys is None:
                continue
            request = RequestMessage(encrypt_for_enclave(keys.encryption_key, tx)).encode()
            self.last_request = (validator, request)
            raw = self.transport.request(validator, request)
            if raw is None:
                continue
            try:
                message = decode_message(raw)
            except ProtocolMessageError:
                self.rejected_responses += 1
                continue
            if not isinstance(message, ResponseMessage) or not self._valid(tx, validator, message.placement):
                self.rejected_responses += 1
                continue
            responses.append((message.placement, validator))
        responses.sort(key=lambda item: -item[0].st)
        return responses

    def newtx(self, tx: Transaction) -> Verdict:
        """Place and submit tx; bottom when no validator produced a verifiable placement."""
        responses = self.query(tx)
        for placement, validator in responses:
            verdict = self.transport.process(validator, ProcessMessage.from_placement(placement, tx).encode())
            if verdict in (Verdict.ACCEPT, Verdict.REJECT):
                return verdict
        return Verdict.BOTTOM

    def read(self, shard: int, h_tx: bytes) -> Optional[Transaction]:
        return self.blockchain.read(shard, h_tx)


@dataclass
class WorldConfig:
    shards: int = 4
    validators: int = 6
    clients: int = 3
    query_limit: int = config.CLIENT_QUERY_LIMIT
    freshness_window: int = config.FRESHNESS_WINDOW
    adversary: str = "none"
    corrupted: Optional[int] = None
    forgeries_per_tx: int = 0
    kill_every: int = 25
    genesis_per_shard: int = 8
    genesis_outputs: int = 8
    double_spend_rate: float = 0.05
    load_slack: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if self.adversary not in ADVERSARIES:
            raise config.ConfigError(f"adversary must be one of {ADVERSARIES}")
        if self.validators < 1 or self.clients < 1 or self.query_limit < 1:
            raise config.ConfigError("validators, clients and query_limit must be >= 1")


@dataclass
class WorldReport:
    submitted: int = 0
    verdicts: Counter = field(default_factory=Counter)
    verdict_mismatches: int = 0
    db_equal: bool = True
    misplaced: int = 0
    forged_attempts: int = 0
    forged_rejected: int = 0
    forged_accepted: int = 0
    responses_rejected: int = 0
    mutations: int = 0
    kills: int = 0
    replays_identical: int = 0
    replays_different: int = 0
    transcript: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def verification_failures(self) -> int:
        return self.responses_rejected + self.forged_rejected

    @property
    def sound(self) -> bool:
        """Real ledger matches the oracle and nothing forged got through."""
        return (self.db_equal and not self.misplaced and not self.forged_accepted
                and not self.verdict_mismatches and not self.replays_different)

    def summary(self) -> Dict[str, Any]:
        return {
            'submitted': self.submitted,
            'accepted': self.verdicts.get(Verdict.ACCEPT, 0),
            'rejected': self.verdicts.get(Verdict.REJECT, 0),
            'bottom': self.verdicts.get(Verdict.BOTTOM, 0),
            'verdict_mismatches': self.verdict_mismatches,
            'db_equal': self.db_equal,
            'misplaced': self.misplaced,
            'forged_attempts': self.forged_attempts,
            'forged_rejected': self.forged_rejected,
            'forged_accepted': self.forged_accepted,
            'responses_rejected': self.responses_rejected,
            'mutations': self.mutations,
            'kills': self.kills,
            'replays_identical': self.replays_identical,
            'sound': self.sound,
        }


class CountermeasureWorld:
    """
    Real protocol and ideal countermeasure run side by side on the same
    transactions, with an adversary controlling some validators and a
    corrupted client trying forged placements.
    """

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.rng = random.Random(cfg.seed)
        self.program = ProgramDescriptor(cfg.shards, load_slack=cfg.load_slack)
        self.registry: Dict[str, EnclaveKeys] = {}
        self.verifier = AttestationVerifier(self.program.identity, self.registry, cfg.freshness_window,
                                            lambda: self.blockchain.height)
        self.blockchain = IdealBlockchain(cfg.shards, self.verifier)

        genesis = [Transaction((), (TxOutput(self.rng.randbytes(config.ADDRESS_BYTES), 10_000),) * cfg.genesis_outputs,
                               nonce_bytes=b"genesis" + i.to_bytes(4, "little"))
                   for i in range(cfg.shards * cfg.genesis_per_shard)]
        self.blockchain.seal_genesis(genesis, BalancedInputPlacer(cfg.shards, cfg.load_slack))
        self.oracle = IdealCountermeasure(cfg.shards, genesis, cfg.load_slack)
        self._unspent: List[Outpoint] = [op for tx in genesis for op in tx.outpoints()]
        self._spent: List[Outpoint] = []

        self.validators = []
        for node_id in range(cfg.validators):
            platform = Platform.from_seed(cfg.seed * 1000 + node_id)
            validator = Validator(node_id, self.blockchain, self.verifier, self.program, platform, HostStorage())
            self.registry[validator.enclave_name] = validator.keys()
            self.validators.append(validator)

        corrupted = cfg.corrupted
        if corrupted is None:
            corrupted = 0 if cfg.adversary == "none" else min(cfg.query_limit - 1, cfg.validators - 1)
        self.corrupted = set(self.rng.sample(range(cfg.validators), corrupted))
        for node_id in self.corrupted:
            if cfg.adversary in ("substitute-tx", "stale-state", "kill-enclave"):
                self.validators[node_id].behavior = cfg.adversary

        self.transport: Transport = AdversarialTransport(cfg.adversary, self.corrupted, cfg.shards, self.rng)
        if cfg.adversary == "substitute-tx":
            self.transport = SubstitutingTransport(self)
        self.clients = [
            ClientSession(i, self.validators, self.registry, self.program.identity, cfg.shards, self.blockchain,
                          cfg.query_limit, self.transport, random.Random(cfg.seed * 7919 + i))
            for i in range(cfg.clients)
        ]
        self.report = WorldReport()
        self._stale_placements: List[Tuple[AttestedPlacement, Transaction]] = []

    def random_tx(self) -> Transaction:
        """A spend of 1-3 unspent outputs, or occasionally of an already spent one."""
        if self._spent and self.rng.random() < self.cfg.double_spend_rate:
            inputs = [self.rng.choice(self._spent)]
        else:
            count = min(len(self._unspent), self.rng.randint(1, 3))
            inputs = self.rng.sample(self._unspent, count)
        outputs = tuple(TxOutput(self.rng.randbytes(config.ADDRESS_BYTES), 100)
                        for _ in range(self.rng.randint(1, 3)))
        return Transaction(tuple(inputs), outputs, nonce_bytes=self.rng.randbytes(8))

    def _record_oracle(self, tx: Transaction, verdict: Verdict) -> None:
        if verdict is Verdict.ACCEPT:
            spent = set(tx.inputs)
            self._unspent = [op for op in self._unspent if op not in spent]
            self._spent.extend(tx.inputs)
            self._unspent.extend(tx.outpoints())

    def honest_validator(self) -> Validator:
        honest = [v for v in self.validators if v.node_id not in self.corrupted]
        return self.rng.choice(honest)

    def submit(self, tx: Transaction, client: ClientSession) -> Tuple[Verdict, Verdict]:
        expected = self.oracle.newtx(tx)
        if self.cfg.adversary == "kill-enclave" and self.report.submitted % self.cfg.kill_every == 0:
            self._kill_and_replay()
        actual = client.newtx(tx)
        self._record_oracle(tx, expected)
        self.report.submitted += 1
        self.report.verdicts[actual] += 1
        if actual is not expected:
            self.report.verdict_mismatches += 1
        self.report.transcript.append({
            'step': self.report.submitted,
            'client': client.client_id,
            'tx': tx.txid.hex()[:16],
            'expected': expected.value,
            'actual': actual.value,
            'shard': self.oracle.placement_of(tx.txid) if expected is Verdict.ACCEPT else None,
            'height': self.blockchain.height,
        })
        return actual, expected

    def _kill_and_replay(self) -> None:
        """Kill a corrupted validator's enclave, restart it and replay its last answer."""
        victims = sorted(self.corrupted) or [self.validators[0].node_id]
        validator = self.validators[self.rng.choice(victims)]
        sample = self.random_tx()
        keys = self.registry[validator.enclave_name]
        inp_c = encrypt_for_enclave(keys.encryption_key, sample)
        validator.sync_enclave()
        before = validator.enclave.resume(inp_c)
        validator.kill_enclave()
        validator.restart_enclave()
        after = validator.enclave.resume(inp_c)
        self.report.kills += 1
        if before is not None and after is not None and before.encode() == after.encode():
            self.report.replays_identical += 1
        else:
            self.report.replays_different += 1
            logger.error(f"Restarted enclave of validator {validator.node_id} answered differently")

    def forge(self, tx: Transaction) -> None:
        """Corrupted client: submit placements that were never attested as claimed."""
        honest = self.honest_validator()
        keys = self.registry[honest.enclave_name]
        placement = honest.request(encrypt_for_enclave(keys.encryption_key, tx))
        if placement is None:
            return
        other = self.random_tx()
        forgeries = [
            AttestedPlacement((placement.s_out + 1) % self.cfg.shards, placement.st, placement.h_tx,
                              placement.status, placement.sigma, placement.enclave_id),
            AttestedPlacement(placement.s_out, placement.st, placement.h_tx, placement.status,
                              self.rng.randbytes(64), placement.enclave_id),
            AttestedPlacement(placement.s_out, placement.st + 1, placement.h_tx, placement.status,
                              placement.sigma, placement.enclave_id),
        ]
        attempts = [(p.s_out, p, tx) for p in forgeries]
        attempts.append((placement.s_out, AttestedPlacement(placement.s_out, placement.st, other.txid,
                                                            placement.status, placement.sigma,
                                                            placement.enclave_id), other))
        self._stale_placements.append((placement, tx))
        old, old_tx = self._stale_placements[0]
        if self.blockchain.height - old.st > self.cfg.freshness_window:
            attempts.append((old.s_out, old, old_tx))
            self._stale_placements.pop(0)

        for s_out, forged, carried in attempts:
            self.report.forged_attempts += 1
            verdict = honest.process(s_out, forged, carried)
            if verdict is Verdict.BOTTOM:
                self.report.forged_rejected += 1
            elif verdict is Verdict.ACCEPT:
                self.report.forged_accepted += 1
                logger.error(f"Forged placement accepted for {carried.txid.hex()[:16]}")

    def run(self, tx_count: int) -> WorldReport:
        for i in range(tx_count):
            tx = self.random_tx()
            client = self.clients[i % len(self.clients)]
            self.submit(tx, client)
            for _ in range(self.cfg.forgeries_per_tx):
                self.forge(self.random_tx())
        return self.finish()

    def finish(self) -> WorldReport:
        report = self.report
        report.db_equal = self.blockchain.contents() == self.oracle.contents()
        report.misplaced = sum(
            1 for shard, entries in enumerate(self.blockchain.db) for txid in entries
            if self.oracle.placement_of(txid) != shard
        )
        report.responses_rejected = sum(client.rejected_responses for client in self.clients)
        report.mutations = self.transport.mutations
        self.blockchain.chain.audit()
        logger.info(f"Countermeasure run: {report.summary()}")
        return report


class SubstitutingTransport(Transport):
    """Corrupted validators resume a substituted plaintext instead of the client's request."""

    def __init__(self, world: CountermeasureWorld):
        self.world = world
        self.mutations = 0

    def request(self, validator: Validator, data: bytes) -> Optional[bytes]:
        if validator.node_id not in self.world.corrupted:
            return super().request(validator, data)
        substitute = self.world.random_tx()
        keys = self.world.registry[validator.enclave_name]
        self.mutations += 1
        return super().request(validator, RequestMessage(encrypt_for_enclave(keys.encryption_key,
                                                                             substitute)).encode())
