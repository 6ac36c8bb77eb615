"""
Transaction workloads: dataset ingestion into a Transaction-as-Nodes (TaN)
graph stream, power-law fitting and synthetic generation.

Dataset format (plain text, one record per line, '#' starts a comment):

    <txid hex> <inputs> <output count> [size bytes] [flags]

<inputs> is '-' for none or a comma-separated list of '<txid hex>[:<index>]'.
Without an explicit index the lowest not-yet-referenced output of that parent
is used. Flags: 'g' genesis (pre-existing, committed before the run starts),
'm' malicious (relay-only attack transaction).
"""

import logging
import os
from collections import Counter
from dataclasses import dataclass
from typing import Any, Dict, Iterable, Iterator, List, NamedTuple, Optional, Set, Tuple

import numpy as np
from sklearn.linear_model import LinearRegression

import config
from core import Outpoint, Transaction, TxOutput
from hashshard import shard_of, validate_shard_count

logger = logging.getLogger(__name__)


class DatasetParseError(ValueError):
    """Raised for malformed dataset records; carries the line number."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class CycleError(ValueError):
    """Raised when spends do not point strictly backwards in the stream."""


class DanglingReferenceError(KeyError):
    """Raised when an input references a transaction that is not known."""


class DegenerateHistogramError(ValueError):
    """Raised when a histogram has fewer than two usable bins."""


class InvalidSpecError(ValueError):
    """Raised for power-law specs that cannot be sampled."""


class WorkloadTx(NamedTuple):
    """Lightweight transaction record fed to the simulator."""

    txid: bytes
    inputs: Tuple[Outpoint, ...]
    output_count: int
    size_bytes: int = config.AVG_TX_SIZE_BYTES
    fee_rate: int = 0
    malicious: bool = False
    genesis: bool = False

    @property
    def relay_only(self) -> bool:
        return self.malicious

    @classmethod
    def from_transaction(cls, tx: Transaction, malicious: bool = False,
                         genesis: bool = False, fee_rate: int = 0) -> "WorkloadTx":
        return cls(tx.txid, tx.inputs, tx.output_count, tx.size_bytes,
                   fee_rate, malicious, genesis)


@dataclass(frozen=True)
class PowerLawSpec:
    """y = scale * x^exponent over the integer support [1, x_max]."""

    scale: float
    exponent: float
    x_max: int = 100

    def probabilities(self) -> np.ndarray:
        if self.exponent >= -1:
            raise InvalidSpecError(f"Exponent must be < -1 for sampling, got {self.exponent}")
        if self.x_max < 1:
            raise InvalidSpecError("x_max must be >= 1")
        support = np.arange(1, self.x_max + 1, dtype=float)
        weights = support ** self.exponent
        return weights / weights.sum()

    def expected_counts(self, x: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(x, dtype=float) ** self.exponent


DEFAULT_DEGREE_SPEC = PowerLawSpec(**config.DEGREE_LAW)
DEFAULT_INSHARD_SPEC = PowerLawSpec(**config.INSHARD_LAW)


class TanGraph:
    """Transactions as nodes; edge (u, v) means u spends an output of v."""

    def __init__(self):
        self.nodes: Dict[bytes, WorkloadTx] = {}
        self.edges: List[Tuple[bytes, bytes]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self) -> Iterator[WorkloadTx]:
        return iter(self.nodes.values())

    def add(self, tx: WorkloadTx) -> None:
        if tx.txid in self.nodes:
            raise CycleError(f"Transaction {tx.txid.hex()} appears twice")
        parents = []
        for op in tx.inputs:
            if op.txid == tx.txid:
                raise CycleError(f"Transaction {tx.txid.hex()} spends itself")
            if op.txid not in self.nodes:
                raise DanglingReferenceError(f"{tx.txid.hex()} references unknown {op.txid.hex()}")
            if op.txid not in parents:
                parents.append(op.txid)
        self.nodes[tx.txid] = tx
        self.edges.extend((tx.txid, parent) for parent in parents)

    @classmethod
    def from_stream(cls, stream: Iterable[WorkloadTx]) -> "TanGraph":
        graph = cls()
        for tx in stream:
            graph.add(tx)
        return graph

    def in_degree_histogram(self) -> Dict[int, int]:
        return degree_histogram(self.nodes.values())


def parse_inputs(field: str, line_no: int) -> List[Tuple[bytes, Optional[int]]]:
    if field == "-":
        return []
    refs = []
    for item in field.split(","):
        txid_hex, _, index = item.partition(":")
        try:
            txid = bytes.fromhex(txid_hex)
            vout = int(index) if index else None
        except ValueError:
            raise DatasetParseError(f"bad input reference {item!r}", line_no)
        if len(txid) != 32 or (vout is not None and vout < 0):
            raise DatasetParseError(f"bad input reference {item!r}", line_no)
        refs.append((txid, vout))
    return refs


class DatasetReader:
    """Class to handle workload dataset reading and validation."""

    def __init__(self):
        self.skipped_dangling = 0
        self.records_read = 0

    def load_dataset(self, file_path: str) -> Iterator[WorkloadTx]:
        """
        Stream records from a dataset file.

        Records whose inputs reference unknown transactions (or out-of-range
        output indexes) are skipped and counted in `skipped_dangling`.

        Args:
            file_path: Path to dataset file

        Yields:
            WorkloadTx records in file order

        Raises:
            DatasetParseError: malformed record (with line number)
            CycleError: a record spends itself or defines a txid that was
                already referenced before its definition
        """
        self.skipped_dangling = 0
        self.records_read = 0
        outputs: Dict[bytes, int] = {}
        next_free: Dict[bytes, int] = {}
        referenced_missing: Set[bytes] = set()

        with open(file_path, "r", encoding="utf-8") as handle:
            for line_no, raw in enumerate(handle, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                fields = line.split()
                if not 3 <= len(fields) <= 5:
                    raise DatasetParseError(f"expected 3-5 fields, got {len(fields)}", line_no)
                try:
                    txid = bytes.fromhex(fields[0])
                    output_count = int(fields[2])
                    size_bytes = int(fields[3]) if len(fields) > 3 else config.AVG_TX_SIZE_BYTES
                except ValueError as e:
                    raise DatasetParseError(str(e), line_no)
                if len(txid) != 32:
                    raise DatasetParseError("txid must be 32 bytes of hex", line_no)
                if output_count < 0 or size_bytes <= 0:
                    raise DatasetParseError("output count must be >= 0 and size > 0", line_no)
                flags = fields[4] if len(fields) > 4 else ""
                if set(flags) - {"g", "m"}:
                    raise DatasetParseError(f"unknown flags {flags!r}", line_no)
                if txid in outputs:
                    raise DatasetParseError(f"duplicate txid {fields[0]}", line_no)
                if txid in referenced_missing:
                    raise CycleError(f"line {line_no}: {fields[0]} is defined after a transaction spending it")

                refs = parse_inputs(fields[1], line_no)
                self.records_read += 1
                inputs = []
                dangling = False
                for parent, vout in refs:
                    if parent == txid:
                        raise CycleError(f"line {line_no}: transaction spends itself")
                    if parent not in outputs:
                        referenced_missing.add(parent)
                        dangling = True
                        break
                    if vout is None:
                        vout = next_free.get(parent, 0)
                    if vout >= outputs[parent]:
                        dangling = True
                        break
                    next_free[parent] = max(next_free.get(parent, 0), vout + 1)
                    inputs.append(Outpoint(parent, vout))

                if dangling:
                    self.skipped_dangling += 1
                    logger.debug(f"Skipping {fields[0]} at line {line_no}: dangling reference")
                    continue

                outputs[txid] = output_count
                fee_rate = config.MIN_RELAY_FEE_SAT_PER_KB if "m" in flags else config.LEGIT_FEE_SAT_PER_KB
                yield WorkloadTx(txid, tuple(inputs), output_count, size_bytes,
                                 fee_rate, "m" in flags, "g" in flags)

        if self.skipped_dangling:
            logger.warning(f"{file_path}: skipped {self.skipped_dangling} records with dangling references")

    def get_dataset_info(self, file_path: str) -> Dict[str, Any]:
        """
        Summarize a dataset file.

        Returns:
            Dictionary with record counts and the degree histogram
        """
        counts = Counter()
        histogram: Counter = Counter()
        for tx in self.load_dataset(file_path):
            counts['genesis' if tx.genesis else 'malicious' if tx.malicious else 'workload'] += 1
            if tx.inputs and not tx.genesis:
                histogram[len(tx.inputs)] += 1
        return {
            'file_path': file_path,
            'file_size_bytes': os.path.getsize(file_path),
            'records': self.records_read,
            'genesis': counts['genesis'],
            'malicious': counts['malicious'],
            'workload': counts['workload'],
            'skipped_dangling': self.skipped_dangling,
            'degree_histogram': dict(sorted(histogram.items())),
        }

    def validate_file(self, file_path: str) -> Tuple[bool, str]:
        """
        Validate a dataset file without keeping its records.

        Returns:
            Tuple of (is_valid, message)
        """
        if not os.path.exists(file_path):
            return False, f"File not found: {file_path}"
        try:
            for _ in self.load_dataset(file_path):
                pass
        except (DatasetParseError, CycleError, UnicodeDecodeError) as e:
            return False, str(e)
        return True, f"{self.records_read} records, {self.skipped_dangling} skipped"


def load_dataset(file_path: str) -> Iterator[WorkloadTx]:
    return DatasetReader().load_dataset(file_path)


def format_record(tx: WorkloadTx) -> str:
    inputs = ",".join(f"{op.txid.hex()}:{op.index}" for op in tx.inputs) or "-"
    flags = ("g" if tx.genesis else "") + ("m" if tx.malicious else "")
    fields = [tx.txid.hex(), inputs, str(tx.output_count), str(tx.size_bytes)]
    if flags:
        fields.append(flags)
    return " ".join(fields)


def write_dataset(file_path: str, stream: Iterable[WorkloadTx]) -> int:
    """Write records in the dataset format; returns the number written."""
    written = 0
    with open(file_path, "w", encoding="utf-8") as handle:
        handle.write("# txid inputs output_count size_bytes [flags]\n")
        for tx in stream:
            handle.write(format_record(tx) + "\n")
            written += 1
    logger.info(f"Wrote {written} records to {file_path}")
    return written


def degree_histogram(stream: Iterable[WorkloadTx]) -> Dict[int, int]:
    """Input-count histogram over spending (non-genesis, non-coinbase) transactions."""
    histogram: Counter = Counter()
    for tx in stream:
        if tx.inputs and not tx.genesis:
            histogram[len(tx.inputs)] += 1
    return dict(sorted(histogram.items()))


def inshard_histogram(stream: Iterable[WorkloadTx], n: int, byteorder: str = "big") -> Dict[int, int]:
    """Histogram of distinct input-shard counts under hash-based placement at n shards."""
    histogram: Counter = Counter()
    for tx in stream:
        if tx.inputs and not tx.genesis:
            shards = {shard_of(op.txid, n, byteorder) for op in tx.inputs}
            histogram[len(shards)] += 1
    return dict(sorted(histogram.items()))


def fit_power_law(histogram: Dict[int, float]) -> PowerLawSpec:
    """
    Least-squares line fit in log10-log10 space.

    Args:
        histogram: degree -> count; zero counts are ignored

    Returns:
        PowerLawSpec(scale=10^intercept, exponent=slope)
    """
    points = sorted((x, y) for x, y in histogram.items() if x > 0 and y > 0)
    if len(points) < 2:
        raise DegenerateHistogramError(f"Need >= 2 nonzero bins, got {len(points)}")

    x = np.log10(np.array([p[0] for p in points], dtype=float)).reshape(-1, 1)
    y = np.log10(np.array([p[1] for p in points], dtype=float))
    model = LinearRegression().fit(x, y)
    return PowerLawSpec(
        scale=float(10 ** model.intercept_),
        exponent=float(model.coef_[0]),
        x_max=int(points[-1][0]),
    )


def sample_power_law(spec: PowerLawSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw integers in [1, x_max] with P(x) proportional to x^exponent (inverse CDF)."""
    cdf = np.cumsum(spec.probabilities())
    draws = np.searchsorted(cdf, rng.random(size), side="right")
    return np.minimum(draws, spec.x_max - 1) + 1


def synth_generate(count: int, degree_spec: PowerLawSpec = DEFAULT_DEGREE_SPEC,
                   inshard_spec: PowerLawSpec = DEFAULT_INSHARD_SPEC, n: int = config.DEFAULT_SHARDS,
                   rng: Optional[np.random.Generator] = None,
                   recency_window: int = config.RECENCY_WINDOW,
                   seed_count: Optional[int] = None, seed_outputs: int = 64,
                   byteorder: str = "big") -> Iterator[WorkloadTx]:
    """
    Generate a synthetic TaN stream.

    Genesis seed transactions (flag genesis, no inputs) come first; then `count`
    spending transactions follow, each spending outputs of earlier ones. In-degree
    follows degree_spec and the number of distinct input shards (under hash
    placement at n shards) follows inshard_spec truncated at min(n, degree).
    Parents are drawn from a per-shard pool of the most recent unspent outputs.

    Yields:
        WorkloadTx records, deterministic for a given rng state
    """
    validate_shard_count(n)
    if count < 1:
        raise ValueError("count must be >= 1")
    degree_spec.probabilities()
    inshard_spec.probabilities()
    rng = rng if rng is not None else np.random.default_rng()
    seed_count = seed_count or max(8 * n, 32)
    pools: List[List[Outpoint]] = [[] for _ in range(n)]
    serial = 0

    def make_tx(inputs: Tuple[Outpoint, ...], outputs: int) -> Transaction:
        nonlocal serial
        serial += 1
        address = rng.bytes(config.ADDRESS_BYTES)
        return Transaction(inputs, (TxOutput(address, 0),) * outputs,
                           nonce_bytes=serial.to_bytes(8, "little"))

    def remember(tx: Transaction) -> None:
        pool = pools[shard_of(tx.txid, n, byteorder)]
        pool.extend(Outpoint(tx.txid, i) for i in range(tx.output_count))
        if len(pool) > 2 * recency_window:
            del pool[:len(pool) - recency_window]

    for _ in range(seed_count):
        tx = make_tx((), seed_outputs)
        remember(tx)
        yield WorkloadTx(tx.txid, (), seed_outputs, genesis=True)

    chunk = 4096
    produced = 0
    while produced < count:
        size = min(chunk, count - produced)
        degrees = sample_power_law(degree_spec, size, rng)
        spans = sample_power_law(inshard_spec, size, rng)
        out_counts = sample_power_law(degree_spec, size, rng) + 1
        for degree, span, out_count in zip(degrees.tolist(), spans.tolist(), out_counts.tolist()):
            available = [s for s in range(n) if pools[s]]
            if not available:
                raise RuntimeError("Every unspent-output pool is empty; raise seed_count or seed_outputs")
            k = min(span, n, degree, len(available))
            chosen = rng.choice(available, size=k, replace=False).tolist()
            shares = np.bincount(rng.integers(0, k, size=degree - k), minlength=k) + 1

            inputs: List[Outpoint] = []
            for shard, share in zip(chosen, shares.tolist()):
                pool = pools[shard]
                for _ in range(min(share, len(pool))):
                    j = int(rng.integers(len(pool)))
                    pool[j], pool[-1] = pool[-1], pool[j]
                    inputs.append(pool.pop())

            tx = make_tx(tuple(inputs), out_count)
            remember(tx)
            yield WorkloadTx(tx.txid, tx.inputs, out_count, fee_rate=config.LEGIT_FEE_SAT_PER_KB)
        produced += size
