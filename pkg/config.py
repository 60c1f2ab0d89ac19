# config.py

#!/usr/bin/env python3
"""Process-wide constants and environment helpers for the hotspot toolkit."""
import logging
import os
from pathlib import Path

import numpy as np

# ─── Environment helpers ───────────────────────────────────────────────────────

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
ENV_PREFIX = "HTK_"


def _read_env_settings(path: Path) -> dict:
    """``HTK_*=value`` lines from a ``.env`` file; other keys and comments are ignored."""

    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        logging.debug("Could not read %s: %s", path, exc)
        return {}

    settings = {}
    for line in text.splitlines():
        key, sep, value = line.strip().partition("=")
        key = key.strip()
        if not sep or not key.startswith(ENV_PREFIX):
            continue
        value = value.strip()
        if len(value) >= 2 and value[0] == value[-1] and value[0] in "\"'":
            value = value[1:-1]
        settings[key] = value
    return settings


def _initialise_env() -> None:
    """Fill unset ``HTK_*`` variables from ``.env`` beside this file, then the cwd."""

    for folder in dict.fromkeys([Path(SCRIPT_DIR), Path.cwd()]):
        path = folder / ".env"
        if path.is_file():
            for key, value in _read_env_settings(path).items():
                os.environ.setdefault(key, value)


_initialise_env()


def _get_int_env_var(name: str, default: int, *, minimum: int = 1) -> int:
    raw = os.environ.get(name)
    if raw is None or not raw.strip():
        return default
    try:
        value = int(raw)
    except ValueError:
        logging.warning("Ignoring %s=%r (not an integer); using %d", name, raw, default)
        return default
    return max(minimum, value)


def worker_threads() -> int:
    """Worker cap from ``HTK_THREADS``; one thread unless asked otherwise."""

    return _get_int_env_var("HTK_THREADS", 1)


def run_slow_tests() -> bool:
    return os.environ.get("HTK_RUN_SLOW", "").strip().lower() in {"1", "true", "yes", "on"}


LOG_LEVEL = os.environ.get("HTK_LOG_LEVEL", "INFO").strip().upper() or "INFO"

# ─── Numerics ─────────────────────────────────────────────────────────────────
TRAIN_DTYPE   = np.float32
EPS_POOL      = 1e-12
BN_MOMENTUM   = 0.1
BN_EPS        = 1e-5
ADAM_BETA1    = 0.9
ADAM_BETA2    = 0.999
ADAM_EPS      = 1e-8

# ─── Metrics ──────────────────────────────────────────────────────────────────
KLD_EPS              = 1e-12
UNIT_SUM_TOLERANCE   = 1e-6
AUC_THRESHOLD        = 0.5
GT_SIGMA_FRACTION    = 0.05
CENTER_SIGMA_FRACTION = 0.25

# ─── Desk-scale defaults ──────────────────────────────────────────────────────
IMAGE_SIZE      = 64
CHUNK_LENGTH    = 8
FEATURE_CHANNELS = 32
PIXEL_NOISE     = 0.02

# ─── File layout ──────────────────────────────────────────────────────────────
CONTAINER_MAGIC    = b"HTK1"
CONTAINER_SUFFIX   = ".htk"
MANIFEST_NAME      = "manifest.json"
ANNOTATIONS_NAME   = "annotations.jsonl"
TRAIN_LOG_NAME     = "train_log.jsonl"
PREDICTIONS_INDEX  = "predictions.json"
CLIPS_DIR          = "clips"
INACTIVE_DIR       = "inactive"
RUN_CONFIG_NAME    = "run_config.json"
OVERLAYS_DIR       = "overlays"
SEQUENCES_DIR      = "sequences"
DENDROGRAM_NAME    = "dendrogram.txt"
MERGES_NAME        = "merges.jsonl"
NEAREST_NAME       = "nearest.json"
