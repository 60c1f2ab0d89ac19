#!/usr/bin/env python3
"""
utils.py

Shared helpers for the hotspot toolkit:
- Coloured console logging
- DEBUG call tracing decorator
- File/dir name sanitising
- Canonical JSON and content hashing
"""
from __future__ import annotations

import functools
import hashlib
import json
import logging
import os
import time
from pathlib import Path
from typing import Any, Dict, Iterable, Union

from colorama import Fore, Style, init as colorama_init

colorama_init(autoreset=True)

_LEVEL_COLOURS: Dict[int, str] = {
    logging.DEBUG: Fore.CYAN,
    logging.INFO: Fore.GREEN,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED + Style.BRIGHT,
}


# ─── Logging ─────────────────────────────────────────────────────────────────
class ColourFormatter(logging.Formatter):
    """Formatter that tints the level name by severity."""

    def format(self, record: logging.LogRecord) -> str:
        colour = _LEVEL_COLOURS.get(record.levelno, "")
        original = record.levelname
        record.levelname = f"{colour}{original:<8}{Style.RESET_ALL}"
        try:
            return super().format(record)
        finally:
            record.levelname = original


def configure_logging(level: Union[int, str] = logging.INFO) -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(ColourFormatter("%(asctime)s %(levelname)s %(message)s", datefmt="%H:%M:%S"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)
    logging.getLogger("PIL").setLevel(logging.WARNING)


def log_call(func):
    """DEBUG-level entry and exit lines, with wall time, for heavy operations."""

    logger = logging.getLogger(func.__module__)

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        logger.debug("→ %s()", func.__qualname__)
        started = time.perf_counter()
        result = func(*args, **kwargs)
        logger.debug("← %s() in %.2fs", func.__qualname__, time.perf_counter() - started)
        return result
    return wrapper


# ─── Names ───────────────────────────────────────────────────────────────────
def sanitize_filename_prefix(name: str) -> str:
    safe = name.strip().replace("/", "-").replace("\\", "-")
    safe = safe.replace(" ", "_")
    safe = "".join(ch for ch in safe if ch.isalnum() or ch in ("_", "-"))
    return safe or "item"


# ─── JSON & hashing ──────────────────────────────────────────────────────────
def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_json_atomic(path: Union[str, Path], payload: Any) -> None:
    """Write *payload* as sorted, indented JSON via a temp file and rename."""

    path = Path(path)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    try:
        with tmp_path.open("w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        tmp_path.replace(path)
    except OSError as exc:
        raise OSError(f"Could not write {path}: {exc}") from exc


def read_json(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path} must contain a JSON object")
    return data


def append_jsonl(path: Union[str, Path], record: Dict[str, Any]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True))
        fh.write("\n")


def write_jsonl(path: Union[str, Path], records: Iterable[Dict[str, Any]]) -> None:
    path = Path(path)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    try:
        with tmp_path.open("w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record, sort_keys=True))
                fh.write("\n")
        tmp_path.replace(path)
    except OSError as exc:
        raise OSError(f"Could not write {path}: {exc}") from exc


def read_jsonl(path: Union[str, Path]) -> list:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: invalid JSON record ({exc})") from exc
    return records


def ensure_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise OSError(f"Could not create directory {path}: {exc}") from exc
    return path
