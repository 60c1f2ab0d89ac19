#!/usr/bin/env python3
"""
render.py

Writes hotspot stacks to disk:
  • one binary PGM ("P5", maxval 255, unit-max scaled) per (image, action)
  • one float64 tensor container per (image, action), unit-sum, for metrics
  • optional colour overlays tinting up to three actions over the source image
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from config import CONTAINER_SUFFIX
from hotspot import HotspotStack
from htk_io import load_tensor, save_tensor
from metrics import Heatmap, unit_max
from utils import ensure_dir, sanitize_filename_prefix

_logger = logging.getLogger(__name__)

OVERLAY_CHANNELS = ("red", "green", "blue")
OVERLAY_ALPHA = 0.6


def heatmap_to_image(heatmap: Union[Heatmap, np.ndarray]) -> Image.Image:
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    scaled = np.round(unit_max(values) * 255).astype(np.uint8)
    return Image.fromarray(scaled)


def write_pgm(path: Union[str, Path], heatmap: Union[Heatmap, np.ndarray]) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    try:
        heatmap_to_image(heatmap).save(path, format="PPM")
    except OSError as exc:
        raise OSError(f"Could not write {path}: {exc}") from exc
    return path


def stack_paths(root: Union[str, Path], image_id: str, action: str) -> Tuple[Path, Path]:
    folder = Path(root) / sanitize_filename_prefix(image_id)
    prefix = sanitize_filename_prefix(action)
    return folder / f"{prefix}.pgm", folder / f"{prefix}{CONTAINER_SUFFIX}"


def write_stack(root: Union[str, Path], stack: HotspotStack) -> Dict[str, Dict[str, str]]:
    """PGM + unit-sum container for every action; returns relative file names per action."""

    root = Path(root)
    written: Dict[str, Dict[str, str]] = {}
    for action, heatmap in zip(stack.actions, stack.maps):
        pgm_path, map_path = stack_paths(root, stack.image_id, action)
        write_pgm(pgm_path, heatmap)
        save_tensor(map_path, heatmap.normalized("unit_sum").values)
        written[action] = {
            "pgm": pgm_path.relative_to(root).as_posix(),
            "map": map_path.relative_to(root).as_posix(),
        }
    _logger.debug("🖼️  %s: %d maps written under %s", stack.image_id, len(written), root)
    return written


def load_stack_map(root: Union[str, Path], relative: str) -> Heatmap:
    return Heatmap(load_tensor(Path(root) / relative), "unit_sum")


def write_sequence(root: Union[str, Path], clip_id: str, stacks: Sequence[HotspotStack]) -> List[Path]:
    """Frame-by-frame PGMs as ``<clip>/<action>/<frame>.pgm``."""

    folder = Path(root) / sanitize_filename_prefix(clip_id)
    paths: List[Path] = []
    for t, stack in enumerate(stacks):
        for action, heatmap in zip(stack.actions, stack.maps):
            paths.append(write_pgm(folder / sanitize_filename_prefix(action) / f"{t:03d}.pgm", heatmap))
    return paths


def overlay_image(
    image: np.ndarray,
    stack: HotspotStack,
    actions: Optional[Sequence[str]] = None,
) -> Image.Image:
    """Tint up to three actions' unit-max maps red, green and blue over a 3×H×W image."""

    chosen = list(actions) if actions is not None else list(stack.actions[: len(OVERLAY_CHANNELS)])
    if len(chosen) > len(OVERLAY_CHANNELS):
        raise ValueError(f"overlay shows at most {len(OVERLAY_CHANNELS)} actions, got {len(chosen)}")
    base = np.clip(np.asarray(image, dtype=np.float64), 0, 1).transpose(1, 2, 0)
    grey = base.mean(axis=2, keepdims=True).repeat(3, axis=2)
    tint = np.zeros_like(base)
    alpha = np.zeros(base.shape[:2])
    for channel, action in enumerate(chosen):
        m = unit_max(stack[action].values)
        tint[..., channel] = m
        alpha = np.maximum(alpha, m)
    alpha = (OVERLAY_ALPHA * alpha)[..., None]
    blended = (1 - alpha) * grey + alpha * tint
    return Image.fromarray(np.round(blended * 255).astype(np.uint8))


def write_overlay(
    path: Union[str, Path],
    image: np.ndarray,
    stack: HotspotStack,
    actions: Optional[Sequence[str]] = None,
) -> Path:
    path = Path(path)
    ensure_dir(path.parent)
    try:
        overlay_image(image, stack, actions).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"Could not write {path}: {exc}") from exc
    return path
