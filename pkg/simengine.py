"""
Deterministic discrete-event engine and region-based network delay model.

Simulated time is integer milliseconds. Events fire in (fire_time, seq) order,
where seq is a global counter assigned at scheduling time.
"""

import heapq
import json
import logging
import math
import random
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import config

logger = logging.getLogger(__name__)


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


class UnknownNodeError(KeyError):
    """Raised for a node that was never added to the network model."""


class EventKind(str, Enum):
    TX_ARRIVAL = "tx-arrival"
    BLOCK_FOUND = "block-found"
    MESSAGE_DELIVERY = "message-delivery"
    PROOF_DELIVERY = "proof-delivery"
    METRICS_SAMPLE = "metrics-sample"
    EVICTION_CHECK = "eviction-check"
    STOP = "stop"


class Event(NamedTuple):
    fire_time: int
    seq: int
    kind: EventKind
    payload: Any = None


Handler = Callable[[Event], None]


class Simulator:
    """Single-threaded event loop; handlers may schedule further events."""

    def __init__(self, record_trace: bool = False):
        self._queue: List[Event] = []
        self._handlers: Dict[EventKind, Handler] = {}
        self._seq = 0
        self._processed = 0
        self._running = False
        self.now = 0
        self.trace: Optional[List[Tuple[int, int, str]]] = [] if record_trace else None
        self.statistics: Dict[str, Any] = {
            'events_scheduled': 0,
            'events_processed': 0,
            'events_unhandled': 0,
            'simulated_ms': 0,
        }

    def __len__(self) -> int:
        return len(self._queue)

    @property
    def pending(self) -> int:
        return len(self._queue)

    @property
    def scheduled_count(self) -> int:
        return self._seq

    @property
    def processed_count(self) -> int:
        return self._processed

    def register_handler(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def schedule(self, fire_time: int, kind: EventKind, payload: Any = None) -> Event:
        """
        Queue an event at an absolute time.

        Raises:
            SchedulingError: if fire_time is earlier than the current clock
        """
        fire_time = int(fire_time)
        if fire_time < self.now:
            raise SchedulingError(f"Cannot schedule {kind.value} at {fire_time} ms, clock is at {self.now} ms")
        event = Event(fire_time, self._seq, kind, payload)
        self._seq += 1
        heapq.heappush(self._queue, event)
        return event

    def schedule_after(self, delay_ms: int, kind: EventKind, payload: Any = None) -> Event:
        return self.schedule(self.now + delay_ms, kind, payload)

    def next_event_time(self) -> Optional[int]:
        return self._queue[0].fire_time if self._queue else None

    def step(self) -> bool:
        """Process one event; False when the queue is empty."""
        if not self._queue:
            return False
        event = heapq.heappop(self._queue)
        self.now = event.fire_time
        if self.trace is not None:
            self.trace.append((event.fire_time, event.seq, event.kind.value))
        handler = self._handlers.get(event.kind)
        if handler is None:
            self.statistics['events_unhandled'] += 1
        else:
            try:
                handler(event)
            except Exception:
                logger.error(f"Handler for {event.kind.value} failed at {event.fire_time} ms (seq {event.seq})")
                raise
        self._processed += 1
        return True

    def run_until(self, t_end: Optional[int] = None) -> int:
        """
        Process every event with fire_time <= t_end (all events when t_end is None).

        Returns:
            Number of events processed by this call
        """
        self._running = True
        processed = 0
        while self._running and self._queue:
            if t_end is not None and self._queue[0].fire_time > t_end:
                break
            self.step()
            processed += 1
        self._running = False
        self.statistics['events_scheduled'] = self._seq
        self.statistics['events_processed'] = self._processed
        self.statistics['simulated_ms'] = self.now
        return processed

    def stop(self) -> None:
        """Stop run_until after the current event."""
        self._running = False


@dataclass(frozen=True)
class NetworkTables:
    """Region latency matrix, per-region bandwidth (bits/s) and node distribution."""

    regions: Tuple[str, ...]
    latency_ms: Tuple[Tuple[int, ...], ...]
    download_bps: Tuple[int, ...]
    upload_bps: Tuple[int, ...]
    node_distribution: Tuple[float, ...]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkTables":
        try:
            tables = cls(
                regions=tuple(data["regions"]),
                latency_ms=tuple(tuple(int(v) for v in row) for row in data["latency_ms"]),
                download_bps=tuple(int(v) for v in data["download_bps"]),
                upload_bps=tuple(int(v) for v in data["upload_bps"]),
                node_distribution=tuple(float(v) for v in data["node_distribution"]),
            )
        except (KeyError, TypeError) as e:
            raise config.ConfigError(f"Network tables are missing or malformed: {str(e)}")
        tables.validate()
        return tables

    @classmethod
    def load(cls, path: Optional[str] = None) -> "NetworkTables":
        path = path or config.NETWORK_TABLES_FILE
        try:
            with open(path, "r", encoding="utf-8") as handle:
                return cls.from_dict(json.load(handle))
        except FileNotFoundError:
            raise config.ConfigError(f"Network tables file not found: {path}")
        except json.JSONDecodeError as e:
            raise config.ConfigError(f"Network tables file {path} is not valid JSON: {str(e)}")

    def validate(self) -> None:
        size = len(self.regions)
        matrix = np.asarray(self.latency_ms)
        if matrix.shape != (size, size):
            raise config.ConfigError(f"latency_ms must be a {size}x{size} matrix")
        if (matrix < 0).any():
            raise config.ConfigError("latencies must be >= 0")
        if not (matrix == matrix.T).all():
            raise config.ConfigError("latency_ms must be symmetric")
        for name in ("download_bps", "upload_bps", "node_distribution"):
            if len(getattr(self, name)) != size:
                raise config.ConfigError(f"{name} needs one entry per region")
        if min(self.download_bps) <= 0 or min(self.upload_bps) <= 0:
            raise config.ConfigError("bandwidths must be > 0")
        if any(share < 0 for share in self.node_distribution) or sum(self.node_distribution) <= 0:
            raise config.ConfigError("node_distribution must be non-negative with a positive sum")


class NetworkModel:
    """
    Message delay between nodes placed in regions.

    delay = latency(region_a, region_b)
            + ceil(size_bytes * 1000 / min(upload_a, download_b))  [bytes/s]
            + uniform jitter in [0, jitter_ms] drawn from a seeded generator
    """

    def __init__(self, tables: NetworkTables, jitter_ms: int = 0, seed: int = 0):
        self.tables = tables
        self.jitter_ms = jitter_ms
        self._jitter_rng = random.Random(seed)
        self._region_index = {name: i for i, name in enumerate(tables.regions)}
        self._node_region: Dict[Any, int] = {}

    @classmethod
    def from_tables(cls, path: Optional[str] = None, jitter_ms: int = 0, seed: int = 0) -> "NetworkModel":
        return cls(NetworkTables.load(path), jitter_ms, seed)

    def __contains__(self, node_id: Any) -> bool:
        return node_id in self._node_region

    @property
    def node_count(self) -> int:
        return len(self._node_region)

    def _resolve_region(self, region: Any) -> int:
        if isinstance(region, str):
            if region not in self._region_index:
                raise config.ConfigError(f"Unknown region {region!r}")
            return self._region_index[region]
        if not 0 <= int(region) < len(self.tables.regions):
            raise config.ConfigError(f"Region index {region} out of range")
        return int(region)

    def add_node(self, node_id: Any, region: Any) -> int:
        """Place a node in a region (name or index); returns the region index."""
        index = self._resolve_region(region)
        self._node_region[node_id] = index
        return index

    def assign_regions(self, node_ids: Iterable[Any], rng: np.random.Generator) -> Dict[Any, int]:
        """Place nodes at random following the table's node distribution."""
        node_ids = list(node_ids)
        weights = np.asarray(self.tables.node_distribution, dtype=float)
        draws = rng.choice(len(weights), size=len(node_ids), p=weights / weights.sum())
        placed = {}
        for node_id, region in zip(node_ids, draws.tolist()):
            placed[node_id] = self.add_node(node_id, region)
        return placed

    def region_of(self, node_id: Any) -> int:
        try:
            return self._node_region[node_id]
        except KeyError:
            raise UnknownNodeError(f"Node {node_id!r} is not part of the network")

    def latency(self, region_a: int, region_b: int) -> int:
        return self.tables.latency_ms[region_a][region_b]

    def bandwidth_bytes(self, sender_region: int, receiver_region: int) -> float:
        bps = min(self.tables.upload_bps[sender_region], self.tables.download_bps[receiver_region])
        return bps / 8

    def message_delay(self, from_node: Any, to_node: Any, size_bytes: int) -> int:
        """Delay in whole milliseconds for a message of size_bytes."""
        a = self.region_of(from_node)
        b = self.region_of(to_node)
        delay = self.latency(a, b)
        if size_bytes > 0:
            delay += math.ceil(size_bytes * 1000 / self.bandwidth_bytes(a, b))
        if self.jitter_ms:
            delay += self._jitter_rng.randint(0, self.jitter_ms)
        return delay

    def delay_bounds(self, size_bytes: int) -> Tuple[int, int]:
        """Smallest and largest delay any node pair can see for size_bytes, jitter excluded."""
        size = len(self.tables.regions)
        delays = []
        for a in range(size):
            for b in range(size):
                transfer = math.ceil(size_bytes * 1000 / self.bandwidth_bytes(a, b)) if size_bytes > 0 else 0
                delays.append(self.latency(a, b) + transfer)
        return min(delays), max(delays)


def zero_latency_tables(regions: Sequence[str] = ("LOCAL",), bandwidth_bps: int = 8_000_000) -> NetworkTables:
    """Tables with no propagation delay, for capacity-only runs."""
    size = len(regions)
    return NetworkTables(
        regions=tuple(regions),
        latency_ms=tuple(tuple(0 for _ in range(size)) for _ in range(size)),
        download_bps=(bandwidth_bps,) * size,
        upload_bps=(bandwidth_bps,) * size,
        node_distribution=(1.0 / size,) * size,
    )
