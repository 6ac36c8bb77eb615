# Configuration settings for the Shard Flood Simulator

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional

from dotenv import load_dotenv

load_dotenv()

# Application settings
APP_NAME = "Shard Flood Simulator"
APP_VERSION = "1.0.0"

# Enhanced debugging options
DEBUG_LEVELS = {
    'MINIMAL': 0,      # Only run summaries
    'STANDARD': 1,     # Include per-run statistics
    'DETAILED': 2,     # Include enclave calls and timings
    'FULL': 3          # Include per-event data
}

# Current debug level (can be overridden by environment variable)
DEBUG_LEVEL = int(os.getenv("SHARDFLOOD_DEBUG_LEVEL", DEBUG_LEVELS['STANDARD']))
DEBUG_SAVE_DEBUG_LOGS = False

# Output settings
OUTPUT_DIR = os.getenv("SHARDFLOOD_OUTPUT_DIR", "results")
NETWORK_TABLES_FILE = os.getenv(
    "SHARDFLOOD_NETWORK_TABLES",
    os.path.join(os.path.dirname(os.path.abspath(__file__)), "network_tables.json"),
)

# Transaction model
AVG_TX_SIZE_BYTES = 500
ADDRESS_BYTES = 20
MIN_RELAY_FEE_SAT_PER_KB = 1000
USD_PER_SATOSHI = 0.10 / 1000
LEGIT_FEE_SAT_PER_KB = 2000
PROOF_SIZE_BYTES = 250

# Shard and block calibration (16 x 2000 / 8 s = 4000 tps)
DEFAULT_SHARDS = 16
DEFAULT_VALIDATORS = 4000
DEFAULT_CLIENTS = 64
BLOCK_CAPACITY = 2000
BLOCK_INTERVAL_MS = 8000
DEFAULT_INJECTION_TPS = 5000
QUEUE_SAMPLE_MS = 10_000
DRAIN_TIMEOUT_MS = 24 * 3600 * 1000

# Workload power laws
DEGREE_LAW = {"scale": 10 ** 6.7, "exponent": -2.3, "x_max": 100}
INSHARD_LAW = {"scale": 10 ** 7.2, "exponent": -2.2, "x_max": 100}
RECENCY_WINDOW = 4000

# Countermeasure
FRESHNESS_WINDOW = 2
CLIENT_QUERY_LIMIT = 3

# Logging settings
LOG_LEVEL = os.getenv("SHARDFLOOD_LOG_LEVEL", "INFO")
DEBUG_LOG_FILE = "shardflood_debug.log"

SHARDERS = ("hash", "tee", "tee-attested")
BIT_ORDERS = ("big", "little")
MEMPOOL_POLICIES = ("fifo", "feerate")
RELAY_ONLY_POLICIES = ("confirm", "hold", "evict")
WORKLOAD_SOURCES = ("synthetic", "file")


class ConfigError(ValueError):
    """Raised when an experiment configuration is invalid."""


@dataclass(frozen=True)
class WorkloadConfig:
    source: str = "synthetic"
    path: Optional[str] = None
    count: int = 100_000
    recency_window: int = RECENCY_WINDOW


@dataclass(frozen=True)
class LawConfig:
    scale: float
    exponent: float
    x_max: int = 100


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated description of one simulation run."""

    shards: int = DEFAULT_SHARDS
    injection_tps: float = DEFAULT_INJECTION_TPS
    seed: int = 7
    validators: int = DEFAULT_VALIDATORS
    clients: int = DEFAULT_CLIENTS
    block_capacity: int = BLOCK_CAPACITY
    block_interval_ms: int = BLOCK_INTERVAL_MS
    sharder: str = "hash"
    bit_order: str = "big"
    malicious_fraction: float = 0.0
    target_shard: int = 0
    mempool_policy: str = "fifo"
    relay_only_policy: str = "confirm"
    relay_only_evict_after_ms: Optional[int] = None
    queue_sample_ms: int = QUEUE_SAMPLE_MS
    drain_timeout_ms: int = DRAIN_TIMEOUT_MS
    network_tables: str = NETWORK_TABLES_FILE
    jitter_ms: int = 0
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    degree_law: LawConfig = field(default_factory=lambda: LawConfig(**DEGREE_LAW))
    inshard_law: LawConfig = field(default_factory=lambda: LawConfig(**INSHARD_LAW))
    freshness_window: int = FRESHNESS_WINDOW
    client_query_limit: int = CLIENT_QUERY_LIMIT
    load_slack: Optional[float] = None

    def __post_init__(self):
        validate_experiment_config(self)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replace(self, **changes: Any) -> "ExperimentConfig":
        data = self.to_dict()
        data.update(changes)
        return experiment_config_from_dict(data)


def validate_experiment_config(cfg: ExperimentConfig) -> None:
    """Raise ConfigError naming the first invalid key."""
    if cfg.shards < 1:
        raise ConfigError("shards must be >= 1")
    if cfg.injection_tps <= 0:
        raise ConfigError("injection_tps must be > 0")
    if cfg.validators < cfg.shards:
        raise ConfigError("validators must be >= shards")
    if cfg.clients < 1:
        raise ConfigError("clients must be >= 1")
    if cfg.block_capacity < 1:
        raise ConfigError("block_capacity must be >= 1")
    if cfg.block_interval_ms < 1:
        raise ConfigError("block_interval_ms must be >= 1")
    if cfg.sharder not in SHARDERS:
        raise ConfigError(f"sharder must be one of {SHARDERS}")
    if cfg.bit_order not in BIT_ORDERS:
        raise ConfigError(f"bit_order must be one of {BIT_ORDERS}")
    if not 0.0 <= cfg.malicious_fraction <= 1.0:
        raise ConfigError("malicious_fraction must be in [0, 1]")
    if not 0 <= cfg.target_shard < cfg.shards:
        raise ConfigError("target_shard must be in [0, shards)")
    if cfg.mempool_policy not in MEMPOOL_POLICIES:
        raise ConfigError(f"mempool_policy must be one of {MEMPOOL_POLICIES}")
    if cfg.relay_only_policy not in RELAY_ONLY_POLICIES:
        raise ConfigError(f"relay_only_policy must be one of {RELAY_ONLY_POLICIES}")
    if cfg.relay_only_policy == "evict" and not cfg.relay_only_evict_after_ms:
        raise ConfigError("relay_only_evict_after_ms is required when relay_only_policy is 'evict'")
    if cfg.queue_sample_ms < 1:
        raise ConfigError("queue_sample_ms must be >= 1")
    if cfg.drain_timeout_ms < 0:
        raise ConfigError("drain_timeout_ms must be >= 0")
    if cfg.jitter_ms < 0:
        raise ConfigError("jitter_ms must be >= 0")
    if cfg.workload.source not in WORKLOAD_SOURCES:
        raise ConfigError(f"workload.source must be one of {WORKLOAD_SOURCES}")
    if cfg.workload.source == "file" and not cfg.workload.path:
        raise ConfigError("workload.path is required for file workloads")
    if cfg.workload.count < 1:
        raise ConfigError("workload.count must be >= 1")
    if cfg.workload.recency_window < 1:
        raise ConfigError("workload.recency_window must be >= 1")
    for name in ("degree_law", "inshard_law"):
        law = getattr(cfg, name)
        if law.scale <= 0 or law.x_max < 1:
            raise ConfigError(f"{name} needs scale > 0 and x_max >= 1")
        if law.exponent >= -1:
            raise ConfigError(f"{name}.exponent must be < -1")
    if cfg.freshness_window < 0:
        raise ConfigError("freshness_window must be >= 0")
    if cfg.client_query_limit < 1:
        raise ConfigError("client_query_limit must be >= 1")
    if cfg.load_slack is not None and cfg.load_slack < 0:
        raise ConfigError("load_slack must be >= 0")


def experiment_config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig from plain data, rejecting unknown keys."""
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {', '.join(unknown)}")

    values = dict(data)
    try:
        if isinstance(values.get("workload"), dict):
            values["workload"] = WorkloadConfig(**values["workload"])
        for name in ("degree_law", "inshard_law"):
            if isinstance(values.get(name), dict):
                values[name] = LawConfig(**values[name])
        return ExperimentConfig(**values)
    except TypeError as e:
        raise ConfigError(f"Invalid configuration structure: {str(e)}")


def load_experiment_config(path: str, overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load an experiment configuration file.

    Args:
        path: JSON file with a subset of the documented keys
        overrides: values applied on top of the file (CLI flags)

    Returns:
        Validated ExperimentConfig
    """
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {str(e)}")

    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")

    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return experiment_config_from_dict(data)
