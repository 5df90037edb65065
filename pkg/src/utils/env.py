#!/usr/bin/env python3
"""
MSVL Toolkit — Environment Settings
"""
import logging
import os
from typing import Optional

logger = logging.getLogger(__name__)


def _positive_int(name: str, raw: Optional[str]) -> Optional[int]:
    if raw is None or not raw.strip():
        return None
    try:
        value = int(raw.strip())
    except ValueError:
        logger.warning("Ignoring %s=%r: not an integer.", name, raw)
        return None
    if value < 1:
        logger.warning("Ignoring %s=%r: must be >= 1.", name, raw)
        return None
    return value


def load_threads(override: Optional[int] = None) -> int:
    """Worker count: explicit override, else MSVL_THREADS, else all cores."""
    if override is not None:
        return max(1, int(override))
    value = _positive_int("MSVL_THREADS", os.getenv("MSVL_THREADS"))
    if value is not None:
        return value
    return os.cpu_count() or 1


def load_bootstrap_default() -> int:
    value = _positive_int("MSVL_BOOTSTRAP", os.getenv("MSVL_BOOTSTRAP"))
    return value if value is not None else 2000


def load_log_level() -> str:
    level = os.getenv("MSVL_LOG_LEVEL", "INFO").strip().upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
        return "INFO"
    return level


def load_log_file() -> Optional[str]:
    path = os.getenv("MSVL_LOG_FILE", "").strip()
    return path or None
