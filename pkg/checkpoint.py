"""Checkpoint directories: ``manifest.json`` plus one tensor container per array."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

from config import CONTAINER_SUFFIX, MANIFEST_NAME
from htk_io import load_tensor, save_tensor
from net import HotspotModel, Img2HeatmapConfig, Img2HeatmapModel, ModelConfig
from utils import ensure_dir, read_json, write_json_atomic

_logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
_GROUPS = ("params", "buffers", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    """Everything needed to resume training or run inference bit-exactly."""

    kind: str
    model_config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    epoch: int = 0
    run_config: Dict[str, Any] = field(default_factory=dict)
    config_hash: str = ""
    rng_state: Dict[str, Any] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


def _file_name(name: str) -> str:
    return name.replace("/", "_") + CONTAINER_SUFFIX


def save_checkpoint(directory: Union[str, Path], checkpoint: Checkpoint) -> Path:
    directory = ensure_dir(directory)
    entries: Dict[str, Dict[str, Dict[str, Any]]] = {}
    for group in _GROUPS:
        arrays: Dict[str, np.ndarray] = getattr(checkpoint, group)
        listed: Dict[str, Dict[str, Any]] = {}
        for name in sorted(arrays):
            array = np.asarray(arrays[name])
            rel = f"{group}/{_file_name(name)}"
            save_tensor(directory / rel, array)
            listed[name] = {"file": rel, "shape": list(array.shape), "dtype": str(array.dtype)}
        entries[group] = listed

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "kind": checkpoint.kind,
        "epoch": checkpoint.epoch,
        "model_config": checkpoint.model_config,
        "run_config": checkpoint.run_config,
        "config_hash": checkpoint.config_hash,
        "rng_state": checkpoint.rng_state,
        "adam_step": checkpoint.adam_step,
        "metadata": checkpoint.metadata,
        "tensors": entries,
    }
    write_json_atomic(directory / MANIFEST_NAME, manifest)
    _logger.debug("Checkpoint written to %s (epoch %d)", directory, checkpoint.epoch)
    return directory


def load_checkpoint(directory: Union[str, Path]) -> Checkpoint:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"No checkpoint manifest at {manifest_path}")
    manifest = read_json(manifest_path)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{manifest_path}: unsupported checkpoint format {manifest.get('format')!r}")

    groups: Dict[str, Dict[str, np.ndarray]] = {}
    for group in _GROUPS:
        listed = manifest.get("tensors", {}).get(group, {})
        loaded: Dict[str, np.ndarray] = {}
        for name, entry in listed.items():
            array = load_tensor(directory / entry["file"])
            if list(array.shape) != list(entry["shape"]):
                raise ValueError(f"{directory / entry['file']}: shape {array.shape} vs manifest {entry['shape']}")
            loaded[name] = array
        groups[group] = loaded

    return Checkpoint(
        kind=manifest["kind"],
        model_config=manifest["model_config"],
        params=groups["params"],
        buffers=groups["buffers"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        adam_step=int(manifest.get("adam_step", 0)),
        epoch=int(manifest.get("epoch", 0)),
        run_config=manifest.get("run_config", {}),
        config_hash=manifest.get("config_hash", ""),
        rng_state=manifest.get("rng_state", {}),
        metadata=manifest.get("metadata", {}),
    )


def epoch_directory(root: Union[str, Path], epoch: int) -> Path:
    return Path(root) / f"epoch_{epoch:03d}"


def list_epochs(root: Union[str, Path]) -> List[int]:
    root = Path(root)
    if not root.is_dir():
        return []
    epochs = []
    for child in root.iterdir():
        if child.is_dir() and child.name.startswith("epoch_") and (child / MANIFEST_NAME).is_file():
            try:
                epochs.append(int(child.name.split("_", 1)[1]))
            except ValueError:
                continue
    return sorted(epochs)


def latest_checkpoint(root: Union[str, Path]) -> Optional[Path]:
    """Return the newest ``epoch_NNN`` directory under *root*, or *root* itself if it is one."""

    root = Path(root)
    if (root / MANIFEST_NAME).is_file():
        return root
    epochs = list_epochs(root)
    return epoch_directory(root, epochs[-1]) if epochs else None


# ─── Models ──────────────────────────────────────────────────────────────────
MODEL_KINDS = ("hotspot", "img2heatmap")


def build_model(checkpoint: Checkpoint):
    """Instantiate the checkpoint's model and load its parameters and buffers."""

    if checkpoint.kind == "hotspot":
        model = HotspotModel(ModelConfig.from_dict(checkpoint.model_config))
    elif checkpoint.kind == "img2heatmap":
        model = Img2HeatmapModel(Img2HeatmapConfig.from_dict(checkpoint.model_config))
    else:
        raise ValueError(f"Unknown checkpoint kind {checkpoint.kind!r}; expected one of {MODEL_KINDS}")
    state = dict(checkpoint.params)
    state.update(checkpoint.buffers)
    model.load_state_dict(state)
    return model


def model_kind(model) -> str:
    return "img2heatmap" if isinstance(model, Img2HeatmapModel) else "hotspot"


def split_state(model) -> Dict[str, Dict[str, np.ndarray]]:
    params = {name: t.data.copy() for name, t in model.parameters().items()}
    buffers = {name: np.array(v, copy=True) for name, v in getattr(model, "buffers", dict)().items()}
    return {"params": params, "buffers": buffers}


def load_model(path: Union[str, Path]):
    """Model from a checkpoint directory, or the newest epoch under a training root."""

    directory = latest_checkpoint(path)
    if directory is None:
        raise FileNotFoundError(f"No checkpoint found under {path}")
    checkpoint = load_checkpoint(directory)
    return build_model(checkpoint), checkpoint
