"""
Hash-based transaction sharding: the output shard is read from the ending
bits of the transaction hash.
"""

import logging
from typing import Optional, Protocol, runtime_checkable

from core import PlacementState

logger = logging.getLogger(__name__)


class InvalidShardCountError(ValueError):
    """Raised for shard counts below one."""


@runtime_checkable
class TxSharder(Protocol):
    """Placement function (tx, state) -> shard id used by shardsim and tee."""

    name: str
    shard_count: int
    needs_state: bool

    def __call__(self, tx, state: Optional[PlacementState] = None) -> int:
        ...


def validate_shard_count(n: int) -> int:
    if not isinstance(n, int) or n < 1:
        raise InvalidShardCountError(f"Shard count must be a positive integer, got {n!r}")
    return n


def shard_of(digest: bytes, n: int, byteorder: str = "big") -> int:
    """
    Shard id for a digest.

    For n = 2^N this is the N low-order bits of the digest read as an integer,
    which equals digest mod 2^N; any other n uses digest mod n.
    """
    validate_shard_count(n)
    if n == 1:
        return 0
    return int.from_bytes(digest, byteorder) % n


class HashSharder:
    """TxSharder placing a transaction by the suffix of its txid; ignores state."""

    name = "hash"
    needs_state = False

    def __init__(self, n: int, byteorder: str = "big"):
        self.shard_count = validate_shard_count(n)
        if byteorder not in ("big", "little"):
            raise InvalidShardCountError(f"Unknown bit order {byteorder!r}")
        self.byteorder = byteorder

    def __call__(self, tx, state: Optional[PlacementState] = None) -> int:
        return shard_of(tx.txid, self.shard_count, self.byteorder)

    def __repr__(self) -> str:
        return f"HashSharder(n={self.shard_count}, byteorder={self.byteorder!r})"


def hash_sharder(n: int, byteorder: str = "big") -> HashSharder:
    return HashSharder(n, byteorder)
