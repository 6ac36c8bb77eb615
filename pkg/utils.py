import glob
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Union

import pandas as pd

import config

logger = logging.getLogger(__name__)

def setup_logging(log_level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Set up logging configuration.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR)
        log_file: Optional log file; stdout is never used so CSV output stays clean
    """
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, log_level.upper()),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )

RATE_UNITS = ((1e9, "G"), (1e6, "M"), (1e3, "k"))

def format_number(number: Union[int, float], decimal_places: int = 1) -> str:
    """Compact rate for log lines: 823512 -> "823.5k"."""
    if pd.isna(number):
        return "n/a"
    for factor, suffix in RATE_UNITS:
        if abs(number) >= factor:
            return f"{number / factor:.{decimal_places}f}{suffix}"
    return f"{number:.{decimal_places}f}"

def parse_int_list(text: str) -> List[int]:
    """
    Parse "4,8,16" or "2-6" (inclusive range) or a mix of both.

    Raises:
        ValueError: on malformed items
    """
    values: List[int] = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        if "-" in item[1:]:
            low, high = item.split("-", 1)
            start, stop = int(low), int(high)
            if stop < start:
                raise ValueError(f"Empty range: {item}")
            values.extend(range(start, stop + 1))
        else:
            values.append(int(item))
    if not values:
        raise ValueError(f"No integers in {text!r}")
    return values

def parse_float_list(text: str) -> List[float]:
    values = [float(item) for item in text.split(",") if item.strip()]
    if not values:
        raise ValueError(f"No numbers in {text!r}")
    return values

def validate_fraction(value: float, name: str = "fraction") -> float:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


def ensure_output_dir(path: Optional[str] = None) -> str:
    """Create (if needed) and return the output directory."""
    out_dir = path or config.OUTPUT_DIR
    os.makedirs(out_dir, exist_ok=True)
    return out_dir

def code_version() -> str:
    """
    Git-style version string: the application version plus a short digest of the
    Python sources, so a manifest pins the exact code that produced a result.
    """
    root = os.path.dirname(os.path.abspath(__file__))
    digest = hashlib.sha256()
    for path in sorted(glob.glob(os.path.join(root, "*.py"))):
        if os.path.basename(path).startswith("test_"):
            continue
        with open(path, "rb") as handle:
            digest.update(handle.read())
    return f"{config.APP_VERSION}-g{digest.hexdigest()[:7]}"

def write_manifest(out_dir: str, command: str, settings: Dict[str, Any],
                   seeds: List[int], outputs: Optional[List[str]] = None) -> str:
    """
    Write manifest.json describing a run well enough to reproduce it.

    Returns:
        Path of the manifest file
    """
    manifest = {
        'application': config.APP_NAME,
        'version': code_version(),
        'command': command,
        'created_at': datetime.now(timezone.utc).isoformat(),
        'seeds': seeds,
        'settings': settings,
        'outputs': outputs or [],
    }
    path = os.path.join(ensure_output_dir(out_dir), "manifest.json")
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=2, default=str, sort_keys=True)
    logger.info(f"Manifest written to {path}")
    return path

def export_to_excel(frames: Dict[str, pd.DataFrame], filename: str) -> str:
    """
    Export several DataFrames to one workbook, one sheet each.

    Args:
        frames: sheet name -> DataFrame
        filename: Output filename

    Returns:
        Success message or error
    """
    try:
        with pd.ExcelWriter(filename, engine='openpyxl') as writer:
            for sheet_name, df in frames.items():
                df.to_excel(writer, sheet_name=sheet_name[:31], index=False)
        return f"Data exported successfully to {filename}"
    except Exception as e:
        logger.error(f"Error exporting to Excel: {str(e)}")
        return f"Export failed: {str(e)}"
