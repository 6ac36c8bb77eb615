"""
Debugging utilities for the Shard Flood Simulator.
Keeps run summaries, enclave calls and timings for post-run inspection.
"""

import json
import logging
import os
import time
from collections import defaultdict
from datetime import datetime
from functools import wraps
from typing import Any, Dict, List, Optional

import config

debug_logger = logging.getLogger('shardflood.debug')

if config.DEBUG_SAVE_DEBUG_LOGS:
    _handler = logging.FileHandler(config.DEBUG_LOG_FILE)
    _handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
    debug_logger.addHandler(_handler)

RUN_HEADLINES = ('throughput_tps', 'avg_latency_ms', 'committed_count', 'malicious_committed')


class DebugTracker:
    """Leveled debug notes plus per-run and per-enclave-call records."""

    def __init__(self, debug_level: Optional[int] = None):
        self.debug_level = config.DEBUG_LEVEL if debug_level is None else debug_level
        self.started_at = datetime.now().isoformat()
        self.notes: List[Dict[str, Any]] = []
        self.runs: List[Dict[str, Any]] = []
        self.enclave_calls: List[Dict[str, Any]] = []
        self.timings: Dict[str, Dict[str, float]] = defaultdict(lambda: {'calls': 0, 'total_s': 0.0, 'max_s': 0.0})

    def note(self, message: str, level: int = config.DEBUG_LEVELS['STANDARD'],
             data: Optional[Dict[str, Any]] = None) -> None:
        """Keep a note when the tracker runs at `level` or above."""
        if self.debug_level < level:
            return
        if data and self.debug_level >= config.DEBUG_LEVELS['DETAILED']:
            debug_logger.debug(f"L{level}: {message} | {json.dumps(data, default=str)}")
        else:
            debug_logger.debug(f"L{level}: {message}")
        self.notes.append({'at': datetime.now().isoformat(), 'level': level, 'message': message,
                           'data': data or {}})

    def track_run(self, context: str, settings: Dict[str, Any], summary: Dict[str, Any]) -> Dict[str, Any]:
        """Record the settings and headline numbers of one simulation run."""
        record = {'context': context, 'at': datetime.now().isoformat(), 'settings': settings, 'summary': summary}
        self.runs.append(record)
        self.note(f"{context}: {settings.get('shards')} shards, fraction {settings.get('malicious_fraction')}",
                  data={key: summary[key] for key in RUN_HEADLINES if key in summary})
        return record

    def track_enclave_call(self, enclave: str, operation: str, elapsed_ms: float,
                           payload_bytes: int = 0, ok: bool = True) -> Dict[str, Any]:
        """Record one install/resume/update_state call; kept from DETAILED up."""
        record = {'enclave': enclave, 'operation': operation, 'elapsed_ms': round(elapsed_ms, 3),
                  'payload_bytes': payload_bytes, 'ok': ok}
        if self.debug_level >= config.DEBUG_LEVELS['DETAILED']:
            self.enclave_calls.append(record)
            self.note(f"{enclave}.{operation} {'ok' if ok else 'failed'}", level=config.DEBUG_LEVELS['DETAILED'],
                      data=record)
        return record

    def record_timing(self, name: str, seconds: float) -> None:
        timing = self.timings[name]
        timing['calls'] += 1
        timing['total_s'] += seconds
        timing['max_s'] = max(timing['max_s'], seconds)

    def report(self) -> Dict[str, Any]:
        failed = sum(not call['ok'] for call in self.enclave_calls)
        return {
            'debug_level': self.debug_level,
            'started_at': self.started_at,
            'runs': self.runs,
            'enclave_calls': {'recorded': len(self.enclave_calls), 'failed': failed},
            'timings': dict(self.timings),
            'notes': self.notes,
        }

    def export_debug_report(self, filepath: Optional[str] = None) -> Optional[str]:
        """Write report() as JSON; returns the path, or None when the file cannot be written."""
        if not filepath:
            filepath = os.path.join(config.OUTPUT_DIR, f"debug_report_{datetime.now():%Y%m%d_%H%M%S}.json")
        try:
            os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)
            with open(filepath, 'w', encoding='utf-8') as handle:
                json.dump(self.report(), handle, indent=2, default=str)
        except OSError as e:
            debug_logger.error(f"Cannot write debug report {filepath}: {str(e)}")
            return None
        self.note(f"Debug report written to {filepath}")
        return filepath


def debug_performance(func):
    """Accumulate call count and wall time of func in the global tracker."""
    @wraps(func)
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        try:
            return func(*args, **kwargs)
        finally:
            elapsed = time.perf_counter() - start
            global_debug_tracker.record_timing(func.__qualname__, elapsed)
            global_debug_tracker.note(f"{func.__qualname__} took {elapsed:.3f}s",
                                      level=config.DEBUG_LEVELS['DETAILED'])
    return wrapper


global_debug_tracker = DebugTracker()
