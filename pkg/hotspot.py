"""Interaction hotspots: gradient-weighted activation maps through the
anticipation module, the Grad-CAM and centre-bias baselines, and
agglomerative clustering of per-class object embeddings."""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.cluster.hierarchy import linkage
from scipy.ndimage import gaussian_filter
from scipy.spatial.distance import pdist, squareform

from config import CENTER_SIGMA_FRACTION, worker_threads
from metrics import Heatmap, gaussian_map, unit_max, unit_sum
from net import HotspotModel, Img2HeatmapModel, img2heatmap_forward
from tensor import ShapeError, Tape, Tensor, bilinear_upsample, constant, getitem

_logger = logging.getLogger(__name__)

TARGETS = ("inactive", "anticipated")
SPACES = ("anticipated", "appearance")
ScoreFn = Callable[[Tensor], Tensor]


# ─── Stacks ──────────────────────────────────────────────────────────────────
@dataclass
class HotspotStack:
    """One heatmap per action for a single source image."""

    image_id: str
    actions: Tuple[str, ...]
    maps: List[Heatmap]

    def __post_init__(self) -> None:
        if len(self.maps) != len(self.actions):
            raise ValueError(f"{self.image_id}: {len(self.maps)} maps for {len(self.actions)} actions")

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, action: Union[int, str]) -> Heatmap:
        if isinstance(action, str):
            action = self.actions.index(action)
        return self.maps[action]

    def normalized(self, norm: str) -> "HotspotStack":
        return HotspotStack(
            self.image_id,
            self.actions,
            [m.normalized(norm, label=f"{self.image_id}/{a}") for a, m in zip(self.actions, self.maps)],
        )

    def as_pairs(self) -> Dict[Tuple[str, str], Heatmap]:
        return {(self.image_id, action): m for action, m in zip(self.actions, self.maps)}


def normalize_map(values: np.ndarray, norm: str, *, label: str = "hotspot map") -> Heatmap:
    values = np.maximum(np.asarray(values, dtype=np.float64), 0)
    if norm == "unit_sum":
        return Heatmap(unit_sum(values, label=label), "unit_sum")
    if norm == "unit_max":
        if values.max() <= 0:
            _logger.warning("⚠️  %s is all zero; using a uniform map", label)
            return Heatmap(np.ones_like(values), "unit_max")
        return Heatmap(unit_max(values), "unit_max")
    return Heatmap(values, "raw")


# ─── Core attribution ────────────────────────────────────────────────────────
def _score_gradient(x: np.ndarray, score_fn: ScoreFn) -> np.ndarray:
    point = Tensor(np.array(x, copy=True), requires_grad=True)
    with Tape() as tape:
        score = score_fn(point)
        if score.size != 1:
            raise ShapeError(f"score function must return a scalar, got shape {score.shape}")
        if not np.isfinite(score.data):
            raise ValueError("score is not finite; model parameters are unusable")
        tape.backward(score)
    return point.grad if point.grad is not None else np.zeros_like(point.data)


def gradient_weighted_map(x: np.ndarray, score_fn: ScoreFn) -> np.ndarray:
    """Σ_k ReLU(∂y/∂x_k ⊙ x_k) for a d×n×n feature map."""

    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected a d×n×n feature map, got {x.shape}")
    grad = _score_gradient(x, score_fn)
    return np.maximum(grad * x, 0).sum(axis=0)


def gradcam_map(x: np.ndarray, score_fn: ScoreFn) -> np.ndarray:
    """ReLU(Σ_k α_k x_k) with α_k the spatial mean of ∂y/∂x_k."""

    x = np.asarray(x)
    if x.ndim != 3:
        raise ShapeError(f"expected a d×n×n feature map, got {x.shape}")
    grad = _score_gradient(x, score_fn)
    alpha = grad.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, x, axes=(0, 0)), 0)


def _check_parameters(model: HotspotModel) -> None:
    for name, tensor in model.parameters().items():
        if not np.all(np.isfinite(tensor.data)):
            raise ValueError(f"model parameter {name} holds non-finite values")


def _action_index(model: HotspotModel, action: Union[int, str]) -> int:
    if isinstance(action, str):
        if action not in model.actions:
            raise ValueError(f"unknown action {action!r}; vocabulary is {model.actions}")
        return model.actions.index(action)
    if not 0 <= action < len(model.actions):
        raise ValueError(f"action index {action} outside [0, {len(model.actions)})")
    return int(action)


def hotspot_map(
    x_inactive: np.ndarray,
    action: Union[int, str],
    model: HotspotModel,
    *,
    target: str = "inactive",
) -> np.ndarray:
    """Raw n×n hotspot map for one action.

    ``inactive`` differentiates the anticipated score with respect to the
    inactive embedding x_I, passing through F_ant. ``anticipated`` takes the
    gradient with respect to x̃_I = F_ant(x_I) instead.
    """

    if target not in TARGETS:
        raise ValueError(f"hotspot target must be one of {TARGETS}, got {target!r}")
    _check_parameters(model)
    a = _action_index(model, action)
    x = np.asarray(x_inactive, dtype=model.dtype)
    if target == "anticipated" and model.config.anticipation:
        x = model.anticipate(constant(x), training=False).data
        return gradient_weighted_map(x, lambda z: getitem(model.score_features(z), a))
    return gradient_weighted_map(x, lambda z: getitem(model.forward_inactive(z, training=False), a))


def _to_image_size(raw: np.ndarray, height: int, width: int, blur_sigma: float) -> np.ndarray:
    up = bilinear_upsample(constant(raw[None].astype(np.float64)), (height, width)).data[0]
    if blur_sigma > 0:
        up = gaussian_filter(up, sigma=blur_sigma, mode="nearest")
    return np.maximum(up, 0)


def _check_image(model: HotspotModel, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=model.dtype)
    size = model.config.encoder.image_size
    if image.shape != (3, size, size):
        raise ShapeError(f"expected a 3×{size}×{size} image, got {image.shape}")
    return image


def predict_hotspots(
    image: np.ndarray,
    model: HotspotModel,
    *,
    image_id: str = "",
    norm: str = "unit_sum",
    target: str = "inactive",
    blur_sigma: float = 0.0,
) -> HotspotStack:
    """Image-sized hotspot map per action: encode, attribute, upsample, normalise."""

    image = _check_image(model, image)
    x_inactive = model.encode_frame(constant(image)).data
    height, width = image.shape[1:]
    maps = []
    for a, action in enumerate(model.actions):
        raw = hotspot_map(x_inactive, a, model, target=target)
        up = _to_image_size(raw, height, width, blur_sigma)
        maps.append(normalize_map(up, norm, label=f"hotspot {image_id or '<image>'}/{action}"))
    return HotspotStack(image_id, model.actions, maps)


def predict_many(
    images: Sequence[Tuple[str, np.ndarray]],
    model: HotspotModel,
    **kwargs: Any,
) -> List[HotspotStack]:
    """:func:`predict_hotspots` over ``(image_id, image)`` pairs, one tape per worker."""

    def run(item: Tuple[str, np.ndarray]) -> HotspotStack:
        return predict_hotspots(item[1], model, image_id=item[0], **kwargs)

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        return list(pool.map(run, images))


def predict_clip_hotspots(
    clip: np.ndarray,
    model: HotspotModel,
    *,
    clip_id: str = "",
    norm: str = "unit_max",
    target: str = "inactive",
    blur_sigma: float = 0.0,
) -> List[HotspotStack]:
    """Hotspot stacks for every frame of a T×3×H×W clip, each frame read as an inactive image."""

    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise ShapeError(f"expected a T×3×H×W clip, got {clip.shape}")
    return [
        predict_hotspots(frame, model, image_id=f"{clip_id}#{t:03d}", norm=norm, target=target, blur_sigma=blur_sigma)
        for t, frame in enumerate(clip)
    ]


# ─── Baselines ───────────────────────────────────────────────────────────────
def gradcam_baseline(
    image: np.ndarray,
    model: HotspotModel,
    action: Union[int, str],
    *,
    norm: str = "unit_sum",
    blur_sigma: float = 0.0,
) -> Heatmap:
    """Grad-CAM on the video classifier's single-step response, no anticipation."""

    _check_parameters(model)
    a = _action_index(model, action)
    image = _check_image(model, image)
    features = model.encode_frame(constant(image)).data
    raw = gradcam_map(features, lambda z: getitem(model.score_features(z), a))
    up = _to_image_size(raw, image.shape[1], image.shape[2], blur_sigma)
    return normalize_map(up, norm, label=f"grad-cam/{model.actions[a]}")


def gradcam_stack(image: np.ndarray, model: HotspotModel, *, image_id: str = "", norm: str = "unit_sum") -> HotspotStack:
    return HotspotStack(image_id, model.actions, [gradcam_baseline(image, model, a, norm=norm) for a in range(len(model.actions))])


def img2heatmap_stack(
    image: np.ndarray,
    model: Img2HeatmapModel,
    *,
    image_id: str = "",
    norm: str = "unit_sum",
) -> HotspotStack:
    """Supervised baseline: the K sigmoid maps of an image-to-heatmap network."""

    size = model.config.image_size
    image = np.asarray(image, dtype=model.dtype)
    if image.shape != (3, size, size):
        raise ShapeError(f"expected a 3×{size}×{size} image, got {image.shape}")
    maps = img2heatmap_forward(constant(image), model).data.astype(np.float64)
    return HotspotStack(
        image_id,
        model.actions,
        [normalize_map(m, norm, label=f"img2heatmap {image_id}/{a}") for a, m in zip(model.actions, maps)],
    )


def center_bias_map(height: int, width: int, sigma_fraction: float = CENTER_SIGMA_FRACTION) -> Heatmap:
    """Unit-sum isotropic Gaussian at the image centre, σ = fraction · min(H, W)."""

    if height < 1 or width < 1:
        raise ValueError(f"center_bias_map needs H, W ≥ 1, got {height}×{width}")
    sigma = sigma_fraction * min(height, width)
    values = gaussian_map([((width - 1) / 2, (height - 1) / 2)], sigma, height, width)
    return Heatmap(values / values.sum(), "unit_sum")


# ─── Clustering ──────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Merge:
    left: int
    right: int
    height: float
    size: int
    members: Tuple[str, ...]


@dataclass
class Dendrogram:
    """Average-linkage merge tree; node ids ≥ len(labels) are earlier merges."""

    labels: Tuple[str, ...]
    merges: List[Merge]
    space: str = "anticipated"
    means: Dict[str, List[float]] = field(default_factory=dict)

    def node_name(self, node: int) -> str:
        if node < len(self.labels):
            return self.labels[node]
        return f"cluster{node - len(self.labels)}"

    def to_records(self) -> List[Dict[str, Any]]:
        return [
            {
                "step": i,
                "left": self.node_name(m.left),
                "right": self.node_name(m.right),
                "height": m.height,
                "size": m.size,
                "members": list(m.members),
            }
            for i, m in enumerate(self.merges)
        ]

    def to_text(self) -> str:
        """Indented merge tree, root first."""

        lines: List[str] = []
        n = len(self.labels)

        def walk(node: int, depth: int) -> None:
            pad = "  " * depth
            if node < n:
                lines.append(f"{pad}- {self.labels[node]}")
                return
            merge = self.merges[node - n]
            lines.append(f"{pad}+ h={merge.height:.4f} [{', '.join(merge.members)}]")
            walk(merge.left, depth + 1)
            walk(merge.right, depth + 1)

        walk(n + len(self.merges) - 1, 0)
        return "\n".join(lines) + "\n"


def cluster_means(means: Mapping[str, np.ndarray], *, space: str = "anticipated") -> Dendrogram:
    """Average-linkage agglomerative clustering of class means under L2 distance."""

    labels = tuple(means)
    if len(labels) < 2:
        raise ValueError("clustering needs at least two object classes")
    matrix = np.stack([np.asarray(means[k], dtype=np.float64) for k in labels])
    tree = linkage(matrix, method="average", metric="euclidean")
    members: List[Tuple[str, ...]] = [(label,) for label in labels]
    merges: List[Merge] = []
    for left, right, height, size in tree:
        left, right = int(left), int(right)
        joined = members[left] + members[right]
        members.append(joined)
        merges.append(Merge(left, right, float(height), int(size), joined))
    return Dendrogram(labels, merges, space, {k: matrix[i].tolist() for i, k in enumerate(labels)})


def class_embeddings(
    model: HotspotModel,
    images_by_class: Mapping[str, Sequence[np.ndarray]],
    *,
    space: str = "anticipated",
    batch_size: int = 32,
) -> Dict[str, np.ndarray]:
    """Per-class mean of pooled embeddings, P(F_ant(x_I)) or P(x_I)."""

    if space not in SPACES:
        raise ValueError(f"embedding space must be one of {SPACES}, got {space!r}")
    if space == "anticipated" and not model.config.anticipation:
        _logger.warning("⚠️  model has no anticipation module; anticipated space equals appearance")
    means: Dict[str, np.ndarray] = {}
    for label, images in images_by_class.items():
        if len(images) == 0:
            raise ValueError(f"object class {label!r} has no images")
        pooled = []
        for start in range(0, len(images), batch_size):
            chunk = np.stack([_check_image(model, img) for img in images[start:start + batch_size]])
            x = model.encode_frame(constant(chunk))
            if space == "anticipated" and model.config.anticipation:
                x = model.anticipate(x, training=False)
            pooled.append(model.pool(x).data)
        means[label] = np.concatenate(pooled).astype(np.float64).mean(axis=0)
    return means


def cluster_objects(
    model: HotspotModel,
    images_by_class: Mapping[str, Sequence[np.ndarray]],
    *,
    space: str = "anticipated",
) -> Dendrogram:
    if len(images_by_class) < 2:
        raise ValueError("clustering needs at least two object classes")
    return cluster_means(class_embeddings(model, images_by_class, space=space), space=space)


def nearest_classes(means: Mapping[str, np.ndarray], k: int = 1) -> Dict[str, List[Tuple[str, float]]]:
    """For each class, its *k* closest other classes by L2 distance of the means."""

    labels = list(means)
    if len(labels) < 2:
        raise ValueError("nearest_classes needs at least two classes")
    k = max(1, min(k, len(labels) - 1))
    dist = squareform(pdist(np.stack([np.asarray(means[c], dtype=np.float64) for c in labels])))
    out: Dict[str, List[Tuple[str, float]]] = {}
    for i, label in enumerate(labels):
        order = [j for j in np.argsort(dist[i], kind="stable") if j != i][:k]
        out[label] = [(labels[j], float(dist[i, j])) for j in order]
    return out
