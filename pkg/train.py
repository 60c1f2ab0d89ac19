"""Losses, active-frame selection, Adam and the training loops."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from checkpoint import (
    Checkpoint,
    epoch_directory,
    latest_checkpoint,
    load_checkpoint,
    model_kind,
    save_checkpoint,
    split_state,
)
from config import ADAM_BETA1, ADAM_BETA2, ADAM_EPS, CHUNK_LENGTH, GT_SIGMA_FRACTION, TRAIN_LOG_NAME
from data import ClipDataset, DatasetManifest, TrainingItem
from metrics import keypoints_to_heatmap, unit_max
from net import HotspotModel, Img2HeatmapModel
from tensor import (
    ShapeError,
    Tape,
    Tensor,
    constant,
    getitem,
    l2_distance,
    l2_normalize,
    l2_pool_spatial,
    relu,
    sigmoid_bce,
    softmax_cross_entropy,
    tmean,
)
from utils import append_jsonl, ensure_dir, log_call, write_json_atomic

_logger = logging.getLogger(__name__)

ANT_LOSS_MODES = ("l2", "triplet")
DIAGNOSTICS_NAME = "nan_diagnostics.json"


class NumericalError(RuntimeError):
    """Non-finite loss or gradient; ``diagnostics`` points at the dump when one was written."""

    def __init__(self, message: str, diagnostics: Optional[Path] = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics


# ─── Configuration ───────────────────────────────────────────────────────────
@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    ant: float = 0.1
    aux: float = 1.0

    def __post_init__(self) -> None:
        for name in ("cls", "ant", "aux"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss.{name} must be non-negative")

    @property
    def uses_inactive(self) -> bool:
        return self.ant > 0 or self.aux > 0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    chunk_length: int = CHUNK_LENGTH
    ant_loss: str = "l2"
    margin: float = 0.5

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("train.lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("train.weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("train.batch_size must be at least 1")
        if self.epochs < 1:
            raise ValueError("train.epochs must be at least 1")
        if self.chunk_length < 1:
            raise ValueError("train.chunk_length must be at least 1")
        if self.ant_loss not in ANT_LOSS_MODES:
            raise ValueError(f"train.ant_loss must be one of {ANT_LOSS_MODES}, got {self.ant_loss!r}")
        if self.ant_loss == "triplet" and self.margin <= 0:
            raise ValueError("train.margin must be positive in triplet mode")


# ─── Active frame & anticipation losses ──────────────────────────────────────
def select_active_frame(step_logits: np.ndarray, action: int) -> int:
    """Frame where softmax(y_t)[action] peaks; the earliest frame wins ties."""

    step_logits = np.asarray(step_logits, dtype=np.float64)
    if step_logits.ndim != 2 or step_logits.shape[0] < 1:
        raise ShapeError(f"select_active_frame expects T×K logits, got {step_logits.shape}")
    if not 0 <= action < step_logits.shape[1]:
        raise ValueError(f"action index {action} outside [0, {step_logits.shape[1]})")
    confidence = softmax(step_logits, axis=1)[:, action]
    return int(np.argmax(confidence))


def loss_ant_l2(
    anticipated: Tensor,
    active: Tensor,
    *,
    pool: Callable[[Tensor], Tensor] = l2_pool_spatial,
) -> Tensor:
    """‖P(x̃_I) − P(x_t*)‖₂, batch mean; the active side is a constant target."""

    if anticipated.shape != active.shape:
        raise ShapeError(f"loss_ant_l2: {anticipated.shape} vs {active.shape}")
    target = constant(pool(constant(active.data)).data)
    return tmean(l2_distance(pool(anticipated), target))


def triplet_margin_loss(anchor: Tensor, positive: Tensor, negative: Tensor, margin: float) -> Tensor:
    """mean(max(0, d(a, p) − d(a, n) + M)) over already-normalised vectors."""

    if margin <= 0:
        raise ValueError("triplet margin must be positive")
    if not (anchor.shape == positive.shape == negative.shape):
        raise ShapeError(f"triplet: {anchor.shape}, {positive.shape}, {negative.shape}")
    gap = l2_distance(anchor, positive) - l2_distance(anchor, negative)
    return tmean(relu(gap + margin))


def loss_ant_triplet(
    active: Tensor,
    positive: Tensor,
    negative: Tensor,
    margin: float = 0.5,
    *,
    pool: Callable[[Tensor], Tensor] = l2_pool_spatial,
) -> Tensor:
    """Triplet anticipation loss on L2-normalised pooled features."""

    if not (active.shape == positive.shape == negative.shape):
        raise ShapeError(f"loss_ant_triplet: {active.shape}, {positive.shape}, {negative.shape}")
    anchor = constant(l2_normalize(pool(constant(active.data))).data)
    return triplet_margin_loss(anchor, l2_normalize(pool(positive)), l2_normalize(pool(negative)), margin)


# ─── Combined loss ───────────────────────────────────────────────────────────
@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    ant: float
    aux: float
    accuracy: float
    paired: int
    active_frames: List[int] = field(default_factory=list)
    active_features: Optional[np.ndarray] = None

    def as_dict(self) -> Dict[str, float]:
        return {
            "loss": float(self.total.data),
            "cls": self.cls,
            "ant": self.ant,
            "aux": self.aux,
            "accuracy": self.accuracy,
            "paired": self.paired,
        }


def _stack(arrays: Sequence[np.ndarray], dtype, what: str) -> Tensor:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"batch {what} have differing shapes {sorted(shapes)}")
    return Tensor(np.stack(arrays).astype(dtype, copy=False))


def combined_loss(
    batch: Sequence[TrainingItem],
    model: HotspotModel,
    weights: LossWeights = LossWeights(),
    mode: str = "l2",
    *,
    margin: float = 0.5,
    negatives: Optional[Sequence[Optional[np.ndarray]]] = None,
    active_features: Optional[np.ndarray] = None,
) -> LossBreakdown:
    """λ_cls·L_cls + λ_ant·L_ant + λ_aux·L_aux for one batch.

    L_cls averages over the batch; L_ant and L_aux average over the items
    that carry an inactive image. *negatives* (triplet mode) aligns with
    *batch*: one inactive image of another object class per item.
    *active_features*, when given, pins the x_t* targets of the paired items.
    """

    if not batch:
        raise ValueError("combined_loss: empty batch")
    if mode not in ANT_LOSS_MODES:
        raise ValueError(f"unknown anticipation loss {mode!r}")
    labels = np.array([item.action for item in batch], dtype=int)
    clips = _stack([item.frames for item in batch], model.dtype, "clips")
    outputs = model.forward_video(clips)
    final_logits = outputs.logits[-1]
    loss_cls = softmax_cross_entropy(final_logits, labels)
    accuracy = float(np.mean(np.argmax(final_logits.data, axis=1) == labels))
    total = loss_cls * weights.cls
    ant_value = aux_value = 0.0
    paired: List[int] = []
    frames: List[int] = []

    if weights.uses_inactive:
        for b, item in enumerate(batch):
            if item.inactive is None:
                _logger.warning("⚠️  %s has no paired inactive image; skipping L_ant/L_aux", item.clip_id)
            elif mode == "triplet" and (negatives is None or negatives[b] is None):
                _logger.warning("⚠️  %s has no triplet negative; skipping L_ant/L_aux", item.clip_id)
            else:
                paired.append(b)

    if paired:
        steps = outputs.steps
        step_logits = outputs.logits_array()
        frames = [select_active_frame(step_logits[b], int(labels[b])) for b in paired]
        rows = [b * steps + t for b, t in zip(paired, frames)]
        if active_features is None:
            active_features = outputs.features.data[rows]
        elif active_features.shape[0] != len(paired):
            raise ShapeError(f"{active_features.shape[0]} active targets for {len(paired)} paired items")
        active = constant(active_features)

        images = [batch[b].inactive for b in paired]
        if mode == "triplet":
            images = images + [negatives[b] for b in paired]
        x_inactive = model.encode_frame(_stack(images, model.dtype, "inactive images"))
        if model.config.anticipation:
            x_anticipated = model.anticipate(x_inactive, training=True)
        else:
            x_anticipated = x_inactive
        count = len(paired)
        positive = getitem(x_anticipated, slice(0, count))

        if mode == "triplet":
            negative = getitem(x_anticipated, slice(count, 2 * count))
            loss_ant = loss_ant_triplet(active, positive, negative, margin, pool=model.pool)
        else:
            loss_ant = loss_ant_l2(positive, active, pool=model.pool)
        loss_aux = softmax_cross_entropy(model.score_features(positive), labels[paired])
        total = total + loss_ant * weights.ant + loss_aux * weights.aux
        ant_value, aux_value = float(loss_ant.data), float(loss_aux.data)

    return LossBreakdown(
        total=total,
        cls=float(loss_cls.data),
        ant=ant_value,
        aux=aux_value,
        accuracy=accuracy,
        paired=len(paired),
        active_frames=frames,
        active_features=active_features,
    )


# ─── Optimiser ───────────────────────────────────────────────────────────────
@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Dict[str, Tensor],
    state: AdamState,
    lr: float,
    weight_decay: float = 0.0,
    *,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """One bias-corrected Adam update from each tensor's ``grad``; ``λ·θ`` joins the gradient.

    A non-finite gradient aborts the step before any parameter or moment changes.
    """

    grads: Dict[str, np.ndarray] = {}
    for name, tensor in params.items():
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if not np.all(np.isfinite(grad)):
            raise NumericalError(f"non-finite gradient for {name}")
        grads[name] = grad + weight_decay * tensor.data if weight_decay else grad

    state.step += 1
    t = state.step
    correction1 = 1 - beta1 ** t
    correction2 = 1 - beta2 ** t
    for name, tensor in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(tensor.data)
            v = np.zeros_like(tensor.data)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        tensor.data = (tensor.data - update).astype(tensor.dtype, copy=False)


# ─── Training loops ──────────────────────────────────────────────────────────
@dataclass
class FitResult:
    model: Any
    log: List[Dict[str, Any]]
    adam: AdamState
    checkpoint: Optional[Path] = None


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, epoch])


def _pick_negatives(
    dataset: ClipDataset,
    indices: Sequence[int],
    rng: np.random.Generator,
) -> List[Optional[np.ndarray]]:
    """For each item, an inactive image of another class from the batch, else from the dataset."""

    out: List[Optional[np.ndarray]] = []
    for i in indices:
        item = dataset[i]
        pool = [j for j in indices if dataset[j].inactive is not None and dataset[j].object_index != item.object_index]
        if not pool:
            pool = dataset.negatives_for(item.object_index)
        out.append(dataset[pool[int(rng.integers(len(pool)))]].inactive if pool else None)
    return out


def _dump_diagnostics(out_dir: Optional[Path], payload: Dict[str, Any]) -> Optional[Path]:
    if out_dir is None:
        return None
    path = ensure_dir(out_dir) / DIAGNOSTICS_NAME
    write_json_atomic(path, payload)
    return path


def _write_checkpoint(
    out_dir: Path,
    model,
    adam: AdamState,
    epoch: int,
    cfg: TrainConfig,
    run_config: Optional[Dict[str, Any]],
    config_hash: str,
) -> Path:
    state = split_state(model)
    checkpoint = Checkpoint(
        kind=model_kind(model),
        model_config=model.config.to_dict(),
        params=state["params"],
        buffers=state["buffers"],
        adam_m={k: v.copy() for k, v in adam.m.items()},
        adam_v={k: v.copy() for k, v in adam.v.items()},
        adam_step=adam.step,
        epoch=epoch,
        run_config=run_config or {},
        config_hash=config_hash,
        rng_state={"scheme": "default_rng([seed, epoch])", "seed": cfg.seed, "next_epoch": epoch + 1},
        metadata={"train": asdict(cfg)},
    )
    return save_checkpoint(epoch_directory(out_dir, epoch), checkpoint)


def _resume(model, resume: Union[str, Path]) -> Tuple[AdamState, int]:
    directory = latest_checkpoint(resume)
    if directory is None:
        raise FileNotFoundError(f"No checkpoint to resume from under {resume}")
    checkpoint = load_checkpoint(directory)
    if checkpoint.kind != model_kind(model):
        raise ValueError(f"{directory}: checkpoint holds a {checkpoint.kind} model")
    state = dict(checkpoint.params)
    state.update(checkpoint.buffers)
    model.load_state_dict(state)
    adam = AdamState(m=dict(checkpoint.adam_m), v=dict(checkpoint.adam_v), step=checkpoint.adam_step)
    _logger.info("↩️  Resuming from %s (epoch %d)", directory, checkpoint.epoch)
    return adam, checkpoint.epoch


def _run_epochs(
    step_fn: Callable[[List[int], np.random.Generator], Dict[str, float]],
    batches_fn: Callable[[np.random.Generator], List[List[int]]],
    model,
    cfg: TrainConfig,
    out_dir: Optional[Path],
    resume: Optional[Union[str, Path]],
    run_config: Optional[Dict[str, Any]],
    config_hash: str,
) -> FitResult:
    adam, start_epoch = (_resume(model, resume) if resume is not None else (AdamState(), 0))
    params = model.parameters()
    log: List[Dict[str, Any]] = []
    last: Optional[Path] = None

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        rng = epoch_rng(cfg.seed, epoch)
        totals: Dict[str, float] = {}
        batches = batches_fn(rng)
        for index, indices in enumerate(batches):
            model.zero_grad()
            with Tape() as tape:
                terms = step_fn(indices, rng)
                loss = terms.pop("_total")
                diag = {"epoch": epoch, "batch_index": index, "items": terms.pop("_items"), "terms": terms}
                if not np.isfinite(loss.data):
                    path = _dump_diagnostics(out_dir, diag)
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {index}", path)
                tape.backward(loss)
            try:
                adam_step(params, adam, cfg.lr, cfg.weight_decay)
            except NumericalError as exc:
                diag["error"] = str(exc)
                raise NumericalError(f"{exc} at epoch {epoch}, batch {index}", _dump_diagnostics(out_dir, diag)) from exc
            for key, value in terms.items():
                totals[key] = totals.get(key, 0.0) + value

        record = {key: value / len(batches) for key, value in totals.items()}
        record.update({"epoch": epoch, "batches": len(batches), "config_hash": config_hash})
        log.append(record)
        _logger.info(
            "📈 epoch %d/%d  %s",
            epoch,
            cfg.epochs,
            "  ".join(f"{k}={record[k]:.4f}" for k in sorted(totals)),
        )
        if out_dir is not None:
            append_jsonl(out_dir / TRAIN_LOG_NAME, record)
            last = _write_checkpoint(out_dir, model, adam, epoch, cfg, run_config, config_hash)

    return FitResult(model=model, log=log, adam=adam, checkpoint=last)


@log_call
def fit(
    dataset: ClipDataset,
    model: HotspotModel,
    cfg: TrainConfig,
    weights: LossWeights = LossWeights(),
    out_dir: Optional[Union[str, Path]] = None,
    *,
    resume: Optional[Union[str, Path]] = None,
    run_config: Optional[Dict[str, Any]] = None,
    config_hash: str = "",
) -> FitResult:
    """Seeded mini-batch training of the hotspot model, one checkpoint per epoch.

    Epoch ``e`` shuffles and samples negatives with ``default_rng([seed, e])``,
    so resuming after epoch ``k`` replays epochs ``k+1…`` exactly.
    """

    if len(dataset) == 0:
        raise ValueError("fit: dataset is empty")
    if tuple(dataset.actions) != tuple(model.actions):
        raise ValueError(f"dataset actions {dataset.actions} differ from model actions {model.actions}")
    out_path = ensure_dir(out_dir) if out_dir is not None else None

    def batches_fn(rng: np.random.Generator) -> List[List[int]]:
        return list(dataset.batches(cfg.batch_size, rng))

    def step_fn(indices: List[int], rng: np.random.Generator) -> Dict[str, Any]:
        items = [dataset[i] for i in indices]
        negatives = None
        if cfg.ant_loss == "triplet" and weights.uses_inactive:
            negatives = _pick_negatives(dataset, indices, rng)
        breakdown = combined_loss(items, model, weights, cfg.ant_loss, margin=cfg.margin, negatives=negatives)
        terms: Dict[str, Any] = breakdown.as_dict()
        terms.pop("paired")
        terms["_total"] = breakdown.total
        terms["_items"] = [item.clip_id for item in items]
        return terms

    return _run_epochs(step_fn, batches_fn, model, cfg, out_path, resume, run_config, config_hash)


def evaluate_accuracy(dataset: ClipDataset, model: HotspotModel, batch_size: int = 16) -> float:
    """Fraction of items whose final-step logits rank the true action first."""

    correct = 0
    for start in range(0, len(dataset), batch_size):
        items = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
        clips = _stack([item.frames for item in items], model.dtype, "clips")
        logits = model.forward_video(clips).logits[-1].data
        correct += int(np.sum(np.argmax(logits, axis=1) == [item.action for item in items]))
    return correct / len(dataset)


# ─── Img2Heatmap ─────────────────────────────────────────────────────────────
@dataclass
class HeatmapSample:
    image_id: str
    image: np.ndarray        # 3×H×W
    target: np.ndarray       # K×H×W unit-max maps; zero for unafforded actions


def heatmap_training_set(
    manifest: DatasetManifest,
    split: str = "train",
    sigma_fraction: float = GT_SIGMA_FRACTION,
) -> List[HeatmapSample]:
    """Inactive images paired with Gaussian maps centred on their hotspot keypoints."""

    size = manifest.image_size
    sigma = sigma_fraction * size
    samples = []
    for entry in manifest.inactive_entries(split):
        target = np.zeros((len(manifest.actions), size, size))
        for action, point in entry["keypoints"].items():
            heat = keypoints_to_heatmap([tuple(point)], sigma, size, size)
            target[manifest.actions.index(action)] = unit_max(heat.values)
        samples.append(HeatmapSample(entry["id"], manifest.load_inactive(entry), target))
    if not samples:
        raise ValueError(f"No inactive images in split {split!r}")
    return samples


@log_call
def fit_img2heatmap(
    samples: Sequence[HeatmapSample],
    model: Img2HeatmapModel,
    cfg: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    *,
    resume: Optional[Union[str, Path]] = None,
    run_config: Optional[Dict[str, Any]] = None,
    config_hash: str = "",
) -> FitResult:
    """Per-pixel BCE of the sigmoid maps against unit-max keypoint heatmaps."""

    if not samples:
        raise ValueError("fit_img2heatmap: no samples")
    out_path = ensure_dir(out_dir) if out_dir is not None else None

    def batches_fn(rng: np.random.Generator) -> List[List[int]]:
        order = rng.permutation(len(samples))
        return [[int(i) for i in order[s:s + cfg.batch_size]] for s in range(0, len(order), cfg.batch_size)]

    def step_fn(indices: List[int], rng: np.random.Generator) -> Dict[str, Any]:
        images = _stack([samples[i].image for i in indices], model.dtype, "images")
        targets = np.stack([samples[i].target for i in indices]).astype(model.dtype)
        loss = sigmoid_bce(model.forward_logits(images), targets)
        return {"bce": float(loss.data), "_total": loss, "_items": [samples[i].image_id for i in indices]}

    return _run_epochs(step_fn, batches_fn, model, cfg, out_path, resume, run_config, config_hash)


