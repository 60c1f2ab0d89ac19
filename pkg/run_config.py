#!/usr/bin/env python3
"""
run_config.py

One nested JSON document per run: built-in defaults, then an optional config
file, then ``--set section.key=value`` overrides. Unknown keys and values of the
wrong type are rejected with their dotted path. The canonical JSON of the result
is hashed and embedded in every checkpoint, prediction index and report.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

from config import (
    AUC_THRESHOLD,
    CENTER_SIGMA_FRACTION,
    FEATURE_CHANNELS,
    GT_SIGMA_FRACTION,
)
from data import DataConfig
from hotspot import TARGETS
from metrics import FPR_DENOMINATORS, KLD_DIRECTIONS, NORMS
from net import (
    POOL_MODES,
    ConvStage,
    EncoderConfig,
    Img2HeatmapConfig,
    ModelConfig,
    default_encoder_config,
)
from train import ANT_LOSS_MODES, LossWeights, TrainConfig
from utils import canonical_json, read_json, sha256_text, write_json_atomic

_logger = logging.getLogger(__name__)

VARIANTS = ("basic", "+res", "+l2", "full")

DEFAULT_CONFIG: Dict[str, Any] = {
    "seed": 0,
    "variant": None,
    "holdout": [],
    "model": {
        "d": FEATURE_CHANNELS,
        "stages": None,
        "dilated": True,
        "pool": "l2",
        "anticipation": True,
        "dtype": "float32",
    },
    "img2heatmap": {
        "channels": [8, 16, 32],
    },
    "train": {
        # TrainConfig defaults to 1e-4; the 30-epoch desk-scale schedule needs the larger step.
        "lr": 1e-3,
        "weight_decay": 5e-4,
        "batch_size": 16,
        "epochs": 30,
        "chunk_length": 8,
        "ant_loss": "l2",
        "margin": 0.5,
    },
    "loss": {
        "cls": 1.0,
        "ant": 0.1,
        "aux": 1.0,
    },
    "hotspot": {
        "target": "inactive",
        "blur_sigma": 0.0,
        "norm": "unit_sum",
    },
    "metrics": {
        "kld_direction": "gt_pred",
        "fpr_denominator": "negatives",
        "threshold": AUC_THRESHOLD,
        "gt_sigma_fraction": GT_SIGMA_FRACTION,
        "center_sigma_fraction": CENTER_SIGMA_FRACTION,
    },
    "data": DataConfig().to_dict(),
}

# Keys whose value is replaced wholesale rather than merged key by key.
_OPEN_KEYS = {"data.affordances"}
# Keys whose default is null and which accept the given type.
_NULLABLE = {"model.stages": list, "variant": str}
_CHOICES: Dict[str, Tuple[str, ...]] = {
    "model.pool": POOL_MODES,
    "model.dtype": ("float32", "float64"),
    "train.ant_loss": ANT_LOSS_MODES,
    "hotspot.target": TARGETS,
    "hotspot.norm": NORMS,
    "metrics.kld_direction": KLD_DIRECTIONS,
    "metrics.fpr_denominator": FPR_DENOMINATORS,
    "variant": VARIANTS,
}


# ─── Merge & validation ──────────────────────────────────────────────────────
def _join(prefix: str, key: str) -> str:
    return f"{prefix}.{key}" if prefix else key


def _check_value(dotted: str, default: Any, value: Any) -> Any:
    if dotted in _NULLABLE:
        if value is not None and not isinstance(value, _NULLABLE[dotted]):
            raise ValueError(f"{dotted} must be null or a {_NULLABLE[dotted].__name__}, got {value!r}")
    elif isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{dotted} must be true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{dotted} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{dotted} must be a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{dotted} must be a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ValueError(f"{dotted} must be a list, got {value!r}")
    choices = _CHOICES.get(dotted)
    if choices is not None and value is not None and value not in choices:
        raise ValueError(f"{dotted} must be one of {choices}, got {value!r}")
    return copy.deepcopy(value)


def _merge(base: Mapping[str, Any], patch: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Deep-merge *patch* into a copy of *base*; keys must already exist in *base*."""

    if not isinstance(patch, Mapping):
        raise ValueError(f"{prefix or 'config'} must be a JSON object")
    merged = copy.deepcopy(dict(base))
    for key, value in patch.items():
        dotted = _join(prefix, key)
        if key not in base:
            raise ValueError(f"Unknown config key '{dotted}'")
        default = base[key]
        if dotted in _OPEN_KEYS:
            if not isinstance(value, dict):
                raise ValueError(f"{dotted} must be a JSON object")
            merged[key] = copy.deepcopy(value)
        elif isinstance(default, dict):
            merged[key] = _merge(default, value, dotted)
        else:
            merged[key] = _check_value(dotted, DEFAULT_CONFIG_LOOKUP.get(dotted, default), value)
    return merged


def _flatten(values: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for key, value in values.items():
        dotted = _join(prefix, key)
        if isinstance(value, dict) and dotted not in _OPEN_KEYS:
            flat.update(_flatten(value, dotted))
        else:
            flat[dotted] = value
    return flat


DEFAULT_CONFIG_LOOKUP = _flatten(DEFAULT_CONFIG)


def parse_override(text: str) -> Tuple[str, Any]:
    """``section.key=value``; the value is read as JSON and kept as a string if that fails."""

    if "=" not in text:
        raise ValueError(f"Override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ValueError(f"Override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _nest(key: str, value: Any) -> Dict[str, Any]:
    parts = key.split(".")
    patch: Dict[str, Any] = {parts[-1]: value}
    for part in reversed(parts[:-1]):
        patch = {part: patch}
    return patch


# ─── RunConfig ───────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class RunConfig:
    """Validated, merged run settings; treat :attr:`values` as read-only."""

    values: Dict[str, Any]

    def __post_init__(self) -> None:
        if self.values["model"]["d"] < 1:
            raise ValueError("model.d must be at least 1")
        if not all(isinstance(c, str) for c in self.values["holdout"]):
            raise ValueError("holdout must list object class names")
        self.data_config()
        self.encoder_config()
        self.train_config()
        self.loss_weights()
        self.img2heatmap_config(self.data_config().actions)
        if self.values["hotspot"]["blur_sigma"] < 0:
            raise ValueError("hotspot.blur_sigma must be non-negative")
        metrics = self.values["metrics"]
        if not 0.0 < metrics["threshold"] <= 1.0:
            raise ValueError("metrics.threshold must be in (0, 1]")
        for key in ("gt_sigma_fraction", "center_sigma_fraction"):
            if metrics[key] <= 0:
                raise ValueError(f"metrics.{key} must be positive")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "RunConfig":
        return cls(_merge(DEFAULT_CONFIG, raw))

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self.values)

    def section(self, name: str) -> Dict[str, Any]:
        return copy.deepcopy(self.values[name])

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def variant(self) -> Optional[str]:
        return self.values.get("variant")

    def config_hash(self) -> str:
        return sha256_text(canonical_json(self.values))

    def with_overrides(self, overrides: Mapping[str, Any]) -> "RunConfig":
        merged = self.values
        for key, value in overrides.items():
            merged = _merge(merged, _nest(key, value))
        return RunConfig(merged)

    def with_file(self, path: Union[str, Path]) -> "RunConfig":
        return RunConfig(_merge(self.values, _read_config_file(path)))

    # ------------------------------------------------------------------
    def data_config(self) -> DataConfig:
        return DataConfig.from_dict(self.values["data"])

    def encoder_config(self, image_size: Optional[int] = None) -> EncoderConfig:
        model = self.values["model"]
        size = image_size if image_size is not None else int(self.values["data"]["image_size"])
        if model["stages"] is not None:
            try:
                stages = tuple(ConvStage.from_list(s) for s in model["stages"])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"model.stages: {exc}") from exc
            return EncoderConfig(stages, image_size=size, dilated=model["dilated"])
        return default_encoder_config(model["d"], size, dilated=model["dilated"])

    def model_config(
        self,
        actions: Optional[Sequence[str]] = None,
        objects: Sequence[str] = (),
        *,
        image_size: Optional[int] = None,
    ) -> ModelConfig:
        model = self.values["model"]
        return ModelConfig(
            encoder=self.encoder_config(image_size),
            actions=tuple(actions if actions is not None else self.values["data"]["actions"]),
            objects=tuple(objects),
            pool=model["pool"],
            anticipation=model["anticipation"],
            dtype=model["dtype"],
            seed=self.seed,
        )

    def img2heatmap_config(self, actions: Sequence[str], *, image_size: Optional[int] = None) -> Img2HeatmapConfig:
        return Img2HeatmapConfig(
            actions=tuple(actions),
            image_size=image_size if image_size is not None else int(self.values["data"]["image_size"]),
            channels=tuple(int(c) for c in self.values["img2heatmap"]["channels"]),
            dtype=self.values["model"]["dtype"],
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.values["train"])

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.values["loss"])


# ─── Loading & variants ──────────────────────────────────────────────────────
def _read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file '{path}' does not exist")
    try:
        return read_json(path)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Iterable[str] = (),
) -> RunConfig:
    """Defaults, then the JSON file at *path*, then each ``section.key=value`` override."""

    merged = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        merged = _merge(merged, _read_config_file(path))
    for text in overrides:
        key, value = parse_override(text)
        merged = _merge(merged, _nest(key, value))
    return RunConfig(merged)


def save_run_config(path: Union[str, Path], cfg: RunConfig) -> Path:
    path = Path(path)
    write_json_atomic(path, cfg.to_dict())
    return path


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Rewrite *cfg* for one rung of the ablation ladder.

    basic: undilated encoder, average pooling, classification loss only
    +res:  dilated encoder, average pooling
    +l2:   dilated encoder, L2 pooling
    full:  +l2 with the anticipation module and its two losses
    """

    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if cfg.values["model"]["stages"] is not None:
        raise ValueError("model.stages fixes the encoder; variants cannot be applied on top of it")
    values = cfg.to_dict()
    model, loss = values["model"], values["loss"]
    model["dilated"] = variant != "basic"
    model["pool"] = "avg" if variant in ("basic", "+res") else "l2"
    model["anticipation"] = variant == "full"
    if variant == "full":
        for key in ("ant", "aux"):
            if loss[key] == 0:
                loss[key] = DEFAULT_CONFIG["loss"][key]
    else:
        loss["ant"] = 0.0
        loss["aux"] = 0.0
    values["variant"] = variant
    return RunConfig(values)


def summarise_diff(old: Mapping[str, Any], new: Mapping[str, Any]) -> str:
    """Readable list of the dotted keys whose values differ."""

    before, after = _flatten(old), _flatten(new)
    changed: List[str] = []
    for key in sorted(set(before) | set(after)):
        if before.get(key) != after.get(key):
            changed.append(f"{key}: {json.dumps(before.get(key))} → {json.dumps(after.get(key))}")
    return "; ".join(changed) if changed else "No changes"
