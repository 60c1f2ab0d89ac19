#!/usr/bin/env python3
"""
data.py

Procedural interaction videos for desk-scale experiments.

Each object class is a coloured body carrying one part per afforded action
(plus a decorative part). Parts for the same action share shape and colour
across classes but sit in class-specific places, so a model can only
localise an action by learning what the part looks like. A clip shows an
arm and hand travelling from outside the frame to the action's part and
resting on it; its paired inactive image shows the same object instance at
rest.

On disk a dataset is::

    manifest.json
    annotations.jsonl
    clips/<id>.htk
    inactive/<object>_<k>.htk
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from config import (
    ANNOTATIONS_NAME,
    CHUNK_LENGTH,
    CLIPS_DIR,
    CONTAINER_SUFFIX,
    IMAGE_SIZE,
    INACTIVE_DIR,
    MANIFEST_NAME,
    PIXEL_NOISE,
    TRAIN_DTYPE,
    worker_threads,
)
from htk_io import load_tensor, save_tensor
from utils import (
    canonical_json,
    ensure_dir,
    log_call,
    read_json,
    read_jsonl,
    sanitize_filename_prefix,
    sha256_text,
    write_json_atomic,
    write_jsonl,
)

_logger = logging.getLogger(__name__)

MANIFEST_FORMAT = 1
Box = Tuple[float, float, float, float]
Colour = Tuple[float, float, float]

# ─── Palettes & geometry ─────────────────────────────────────────────────────
BACKGROUND: Colour = (0.92, 0.92, 0.88)
SKIN: Colour = (0.87, 0.63, 0.50)
ARM: Colour = (0.78, 0.52, 0.40)
DECOY: Colour = (0.62, 0.62, 0.62)

BODY_PALETTE: List[Colour] = [
    (0.30, 0.35, 0.55),
    (0.25, 0.50, 0.40),
    (0.45, 0.30, 0.50),
    (0.40, 0.45, 0.25),
    (0.20, 0.40, 0.55),
    (0.35, 0.35, 0.35),
]
PART_PALETTE: List[Colour] = [
    (0.95, 0.90, 0.20),
    (0.20, 0.85, 0.95),
    (0.95, 0.30, 0.80),
    (0.55, 0.95, 0.30),
    (0.98, 0.98, 0.98),
    (0.10, 0.10, 0.10),
]
PART_SHAPES = ("rect", "ellipse", "diamond", "bar")

GRID = 3                    # body split into GRID×GRID part cells
PART_FILL = 0.7             # part size relative to its cell
SHIFT_FRACTION = 0.10       # instance position jitter, fraction of image size
COLOUR_JITTER = 0.05
HAND_RADIUS_FRACTION = 0.09
PRESSED_SHADE = 0.6
ANNOTATION_SPREAD = 0.6     # annotator points fall in this central share of the part

DEFAULT_OBJECTS = ("kettle", "drawer", "lamp", "radio")
DEFAULT_ACTIONS = ("press", "rotate", "pull")


def stable_seed(*parts: Any) -> int:
    """64-bit seed derived from *parts*; independent of PYTHONHASHSEED."""

    return int(sha256_text(":".join(str(p) for p in parts))[:16], 16)


# ─── Configuration ───────────────────────────────────────────────────────────
@dataclass(frozen=True)
class DataConfig:
    objects: Tuple[str, ...] = DEFAULT_OBJECTS
    actions: Tuple[str, ...] = DEFAULT_ACTIONS
    affordances: Dict[str, Tuple[str, ...]] = field(default_factory=dict)
    train_clips: int = 60
    test_clips: int = 15
    image_size: int = IMAGE_SIZE
    clip_length: int = CHUNK_LENGTH
    noise: float = PIXEL_NOISE
    annotators: int = 3

    def __post_init__(self) -> None:
        if len(self.objects) < 2:
            raise ValueError("data.objects must name at least two object classes")
        if len(self.actions) < 2:
            raise ValueError("data.actions must name at least two actions")
        if len(set(self.objects)) != len(self.objects) or len(set(self.actions)) != len(self.actions):
            raise ValueError("data.objects and data.actions must not repeat names")
        if len(self.actions) > GRID * GRID - 1:
            raise ValueError(f"data.actions supports at most {GRID * GRID - 1} actions")
        for obj, acts in self.affordances.items():
            if obj not in self.objects:
                raise ValueError(f"data.affordances.{obj}: unknown object")
            unknown = set(acts) - set(self.actions)
            if unknown:
                raise ValueError(f"data.affordances.{obj}: unknown actions {sorted(unknown)}")
            if not acts:
                raise ValueError(f"data.affordances.{obj}: must afford at least one action")
        for action in self.actions:
            holders = [o for o in self.objects if action in self.afforded(o)]
            if len(holders) < 2:
                raise ValueError(f"data: action {action!r} must be afforded by at least two objects")
        if self.train_clips < 1 or self.test_clips < 0:
            raise ValueError("data.train_clips must be ≥ 1 and data.test_clips ≥ 0")
        if self.image_size < 16:
            raise ValueError("data.image_size must be at least 16")
        if self.clip_length < 1:
            raise ValueError("data.clip_length must be at least 1")
        if self.noise < 0:
            raise ValueError("data.noise must be non-negative")
        if self.annotators < 1:
            raise ValueError("data.annotators must be at least 1")

    def afforded(self, obj: str) -> Tuple[str, ...]:
        acts = self.affordances.get(obj)
        if acts is None:
            return self.actions
        return tuple(a for a in self.actions if a in acts)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "objects": list(self.objects),
            "actions": list(self.actions),
            "affordances": {k: list(v) for k, v in sorted(self.affordances.items())},
            "train_clips": self.train_clips,
            "test_clips": self.test_clips,
            "image_size": self.image_size,
            "clip_length": self.clip_length,
            "noise": self.noise,
            "annotators": self.annotators,
        }

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "DataConfig":
        return cls(
            objects=tuple(raw["objects"]),
            actions=tuple(raw["actions"]),
            affordances={k: tuple(v) for k, v in raw.get("affordances", {}).items()},
            train_clips=int(raw["train_clips"]),
            test_clips=int(raw["test_clips"]),
            image_size=int(raw["image_size"]),
            clip_length=int(raw["clip_length"]),
            noise=float(raw["noise"]),
            annotators=int(raw.get("annotators", 3)),
        )

    def config_hash(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))


# ─── Scenes ──────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class Part:
    action: Optional[str]
    shape: str
    box: Box            # fractions of the image, before instance jitter
    colour: Colour


@dataclass(frozen=True)
class SceneSpec:
    object_name: str
    class_id: int
    body: Box
    body_colour: Colour
    parts: Tuple[Part, ...]
    image_size: int
    noise: float

    @property
    def actions(self) -> Tuple[str, ...]:
        return tuple(p.action for p in self.parts if p.action is not None)


def scene_spec(class_id: int, config: DataConfig) -> SceneSpec:
    """Class layout: fixed per object name, independent of the dataset seed."""

    if not 0 <= class_id < len(config.objects):
        raise ValueError(f"class id {class_id} outside object vocabulary of {len(config.objects)}")
    name = config.objects[class_id]
    rng = np.random.default_rng(stable_seed("layout", name))
    x0, y0 = 0.15 + rng.uniform(0, 0.08, size=2)
    x1, y1 = 0.85 - rng.uniform(0, 0.08, size=2)
    cell_w, cell_h = (x1 - x0) / GRID, (y1 - y0) / GRID
    cells = rng.permutation(GRID * GRID)

    afforded = config.afforded(name)
    slots: List[Optional[str]] = list(afforded) + [None]
    parts = []
    for slot, cell in zip(slots, cells):
        cx = x0 + (cell % GRID + 0.5) * cell_w
        cy = y0 + (cell // GRID + 0.5) * cell_h
        half_w, half_h = cell_w * PART_FILL / 2, cell_h * PART_FILL / 2
        box = (cx - half_w, cy - half_h, cx + half_w, cy + half_h)
        if slot is None:
            parts.append(Part(None, "ellipse", box, DECOY))
        else:
            idx = config.actions.index(slot)
            parts.append(Part(slot, PART_SHAPES[idx % len(PART_SHAPES)], box, PART_PALETTE[idx % len(PART_PALETTE)]))

    if class_id < len(BODY_PALETTE):
        body_colour = BODY_PALETTE[class_id]
    else:
        body_colour = tuple(float(c) for c in rng.uniform(0.2, 0.55, size=3))
    return SceneSpec(name, class_id, (x0, y0, x1, y1), body_colour, tuple(parts), config.image_size, config.noise)


@dataclass
class ObjectInstance:
    """One jittered rendering of a class; boxes and keypoints are in pixels."""

    spec: SceneSpec
    offset: Tuple[float, float]
    body_box: Box
    body_colour: Colour
    part_boxes: List[Box]
    part_colours: List[Colour]
    image: np.ndarray
    keypoints: Dict[str, Tuple[float, float]]

    def hotspot_box(self, action: str) -> Box:
        for part, box in zip(self.spec.parts, self.part_boxes):
            if part.action == action:
                return box
        raise ValueError(f"{self.spec.object_name} does not afford {action!r}")


def _rgb255(colour: Sequence[float]) -> Tuple[int, int, int]:
    return tuple(int(round(255 * min(1.0, max(0.0, c)))) for c in colour)


def _jitter_colour(colour: Colour, rng: np.random.Generator) -> Colour:
    return tuple(float(np.clip(c + rng.uniform(-COLOUR_JITTER, COLOUR_JITTER), 0, 1)) for c in colour)


def _draw_part(draw: ImageDraw.ImageDraw, shape: str, box: Box, fill) -> None:
    x0, y0, x1, y1 = box
    if shape == "ellipse":
        draw.ellipse(box, fill=fill)
    elif shape == "diamond":
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=fill)
    elif shape == "bar":
        radius = max(1, int(min(x1 - x0, y1 - y0) / 3))
        draw.rounded_rectangle(box, radius=radius, fill=fill)
    else:
        draw.rectangle(box, fill=fill)


def render_scene(
    instance: ObjectInstance,
    *,
    hand: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None,
    pressed: Optional[str] = None,
) -> np.ndarray:
    """Noise-free 3×H×W float image in [0, 1].

    *hand* is ``(shoulder, centre)`` in pixels; *pressed* shades that action's part.
    """

    size = instance.spec.image_size
    img = Image.new("RGB", (size, size), _rgb255(BACKGROUND))
    draw = ImageDraw.Draw(img)
    draw.rectangle(instance.body_box, fill=_rgb255(instance.body_colour))
    for part, box, colour in zip(instance.spec.parts, instance.part_boxes, instance.part_colours):
        if pressed is not None and part.action == pressed:
            colour = tuple(c * PRESSED_SHADE for c in colour)
        _draw_part(draw, part.shape, box, _rgb255(colour))
    if hand is not None:
        shoulder, (cx, cy) = hand
        radius = HAND_RADIUS_FRACTION * size
        draw.line([shoulder, (cx, cy)], fill=_rgb255(ARM), width=max(1, int(round(radius))))
        draw.ellipse((cx - radius, cy - radius, cx + radius, cy + radius), fill=_rgb255(SKIN))
    return np.asarray(img, dtype=TRAIN_DTYPE).transpose(2, 0, 1) / TRAIN_DTYPE(255)


def gen_object(class_id: int, rng: np.random.Generator, config: Optional[DataConfig] = None) -> ObjectInstance:
    """Render a jittered instance of *class_id*; keypoints are hotspot part centres."""

    config = config or DataConfig()
    spec = scene_spec(class_id, config)
    size = spec.image_size
    dx, dy = (rng.uniform(-SHIFT_FRACTION, SHIFT_FRACTION, size=2) * size).tolist()

    def place(box: Box) -> Box:
        return (box[0] * size + dx, box[1] * size + dy, box[2] * size + dx, box[3] * size + dy)

    part_boxes = [place(p.box) for p in spec.parts]
    keypoints = {
        p.action: ((b[0] + b[2]) / 2, (b[1] + b[3]) / 2)
        for p, b in zip(spec.parts, part_boxes)
        if p.action is not None
    }
    instance = ObjectInstance(
        spec=spec,
        offset=(dx, dy),
        body_box=place(spec.body),
        body_colour=_jitter_colour(spec.body_colour, rng),
        part_boxes=part_boxes,
        part_colours=[_jitter_colour(p.colour, rng) for p in spec.parts],
        image=np.zeros((3, size, size), dtype=TRAIN_DTYPE),
        keypoints=keypoints,
    )
    instance.image = render_scene(instance)
    return instance


# ─── Clips ───────────────────────────────────────────────────────────────────
@dataclass
class ClipRecord:
    clip_id: str
    frames: np.ndarray                  # T×3×H×W
    action: str
    object_name: str
    inactive: np.ndarray                # 3×H×W
    keypoints: Dict[str, Tuple[float, float]]
    hand_path: np.ndarray               # T×2 manipulator centres (x, y)


def contact_frames(length: int) -> int:
    return math.ceil(length / 3)


def _entry_point(size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """A point just outside one image border, and the outward unit direction."""

    radius = HAND_RADIUS_FRACTION * size
    along = rng.uniform(0.2, 0.8) * size
    side = int(rng.integers(4))
    outside = -radius * 0.5
    if side == 0:
        return np.array([along, outside]), np.array([0.0, -1.0])
    if side == 1:
        return np.array([size - outside, along]), np.array([1.0, 0.0])
    if side == 2:
        return np.array([along, size - outside]), np.array([0.0, 1.0])
    return np.array([outside, along]), np.array([-1.0, 0.0])


def _add_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma <= 0:
        return image.astype(TRAIN_DTYPE, copy=True)
    noisy = image + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(TRAIN_DTYPE)


def gen_clip(
    instance: ObjectInstance,
    action: str,
    length: int,
    rng: np.random.Generator,
    *,
    clip_id: str = "",
    noise: Optional[float] = None,
) -> ClipRecord:
    """Manipulator enters from a border and rests on the hotspot for the final ⌈T/3⌉ frames."""

    if action not in instance.spec.actions:
        raise ValueError(f"{instance.spec.object_name} does not afford {action!r}")
    if length < 1:
        raise ValueError("clip length must be at least 1")
    sigma = instance.spec.noise if noise is None else noise
    size = instance.spec.image_size
    radius = HAND_RADIUS_FRACTION * size

    target = np.asarray(instance.keypoints[action])
    entry, outward = _entry_point(size, rng)
    shoulder = entry + outward * 3 * radius
    contact = contact_frames(length)
    approach = length - contact

    path = np.zeros((length, 2))
    for t in range(length):
        if t < approach:
            path[t] = entry + (target - entry) * (t / approach)
        else:
            path[t] = target + rng.uniform(-0.5, 0.5, size=2)

    frames = np.empty((length, 3, size, size), dtype=TRAIN_DTYPE)
    for t in range(length):
        pressed = action if t >= approach else None
        clean = render_scene(instance, hand=(tuple(shoulder), tuple(path[t])), pressed=pressed)
        frames[t] = _add_noise(clean, sigma, rng)
    inactive = _add_noise(instance.image, sigma, rng)
    return ClipRecord(
        clip_id=clip_id,
        frames=frames,
        action=action,
        object_name=instance.spec.object_name,
        inactive=inactive,
        keypoints=dict(instance.keypoints),
        hand_path=path,
    )


def annotate(instance: ObjectInstance, action: str, annotators: int, rng: np.random.Generator) -> List[List[List[float]]]:
    """Simulated annotators: 1–2 points each inside the central part of the hotspot."""

    x0, y0, x1, y1 = instance.hotspot_box(action)
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    half_w = (x1 - x0) * ANNOTATION_SPREAD / 2
    half_h = (y1 - y0) * ANNOTATION_SPREAD / 2
    size = instance.spec.image_size
    out = []
    for _ in range(annotators):
        count = int(rng.integers(1, 3))
        points = []
        for _ in range(count):
            x = float(np.clip(cx + rng.uniform(-half_w, half_w), 0, size - 1))
            y = float(np.clip(cy + rng.uniform(-half_h, half_h), 0, size - 1))
            points.append([round(x, 4), round(y, 4)])
        out.append(points)
    return out


# ─── Manifest ────────────────────────────────────────────────────────────────
@dataclass
class DatasetManifest:
    root: Path
    actions: Tuple[str, ...]
    objects: Tuple[str, ...]
    affordances: Dict[str, List[str]]
    clips: List[Dict[str, Any]]
    inactive: List[Dict[str, Any]]
    seed: int
    config: Dict[str, Any]
    config_hash: str
    unfamiliar: Tuple[str, ...] = ()

    @property
    def image_size(self) -> int:
        return int(self.config["image_size"])

    @property
    def clip_length(self) -> int:
        return int(self.config["clip_length"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": MANIFEST_FORMAT,
            "actions": list(self.actions),
            "objects": list(self.objects),
            "affordances": self.affordances,
            "clips": self.clips,
            "inactive": self.inactive,
            "seed": self.seed,
            "config": self.config,
            "config_hash": self.config_hash,
            "unfamiliar": list(self.unfamiliar),
            "splits": {
                split: [c["id"] for c in self.clips if c["split"] == split]
                for split in ("train", "test")
            },
        }

    def manifest_hash(self) -> str:
        return sha256_text(canonical_json(self.to_dict()))

    def save(self, path: Optional[Union[str, Path]] = None) -> Path:
        path = Path(path) if path is not None else self.root / MANIFEST_NAME
        write_json_atomic(path, self.to_dict())
        return path

    @classmethod
    def load(cls, root: Union[str, Path]) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        if not path.is_file():
            raise FileNotFoundError(f"No dataset manifest at {path}")
        raw = read_json(path)
        if raw.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"{path}: unsupported manifest format {raw.get('format')!r}")
        return cls(
            root=path.parent,
            actions=tuple(raw["actions"]),
            objects=tuple(raw["objects"]),
            affordances={k: list(v) for k, v in raw["affordances"].items()},
            clips=list(raw["clips"]),
            inactive=list(raw["inactive"]),
            seed=int(raw["seed"]),
            config=raw["config"],
            config_hash=raw["config_hash"],
            unfamiliar=tuple(raw.get("unfamiliar", ())),
        )

    # ------------------------------------------------------------------
    def clip_entries(self, split: Optional[str] = None) -> List[Dict[str, Any]]:
        return [c for c in self.clips if split is None or c["split"] == split]

    def inactive_entries(self, split: Optional[str] = None) -> List[Dict[str, Any]]:
        return [e for e in self.inactive if split is None or e["split"] == split]

    def inactive_by_id(self) -> Dict[str, Dict[str, Any]]:
        return {e["id"]: e for e in self.inactive}

    def load_clip(self, entry: Dict[str, Any]) -> np.ndarray:
        return load_tensor(self.root / entry["file"])

    def load_inactive(self, entry: Union[str, Dict[str, Any]]) -> np.ndarray:
        if isinstance(entry, str):
            entry = self.inactive_by_id()[entry]
        return load_tensor(self.root / entry["file"])

    @property
    def annotations_path(self) -> Path:
        return self.root / ANNOTATIONS_NAME

    def annotation_records(self) -> List[Dict[str, Any]]:
        """Annotation records for the inactive images this manifest lists."""

        if not self.annotations_path.is_file():
            raise FileNotFoundError(f"No annotations at {self.annotations_path}")
        ids = {e["id"] for e in self.inactive}
        return [r for r in read_jsonl(self.annotations_path) if r["image_id"] in ids]

    def part_boxes(self) -> Dict[Tuple[str, str], List[float]]:
        """Bounding box of the hotspot part per (inactive image, action)."""

        return {
            (e["id"], action): list(box)
            for e in self.inactive
            for action, box in e["parts"].items()
        }

    def restrict(self, objects: Sequence[str], *, unfamiliar: Sequence[str] = ()) -> "DatasetManifest":
        keep = set(objects)
        return replace(
            self,
            clips=[c for c in self.clips if c["object"] in keep],
            inactive=[e for e in self.inactive if e["object"] in keep],
            unfamiliar=tuple(unfamiliar),
        )

    def summary(self) -> str:
        train = len(self.clip_entries("train"))
        test = len(self.clip_entries("test"))
        return (
            f"{len(self.objects)} objects × {len(self.actions)} actions, "
            f"{train} train / {test} test clips, {len(self.inactive)} inactive images, "
            f"{self.image_size}px, T={self.clip_length}"
        )


# ─── Generation ──────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class _ClipJob:
    clip_id: str
    split: str
    class_id: int
    action: str
    inactive_id: str


def _plan_jobs(config: DataConfig) -> List[_ClipJob]:
    jobs: List[_ClipJob] = []
    counters = {obj: 0 for obj in config.objects}
    for split, per_cell in (("train", config.train_clips), ("test", config.test_clips)):
        for class_id, obj in enumerate(config.objects):
            safe = sanitize_filename_prefix(obj)
            for action in config.afforded(obj):
                for k in range(per_cell):
                    clip_id = f"{split}-{safe}-{sanitize_filename_prefix(action)}-{k:03d}"
                    inactive_id = f"{safe}_{counters[obj]:04d}"
                    counters[obj] += 1
                    jobs.append(_ClipJob(clip_id, split, class_id, action, inactive_id))
    return jobs


def _run_job(job: _ClipJob, config: DataConfig, seed: int, root: Path) -> Tuple[Dict, Dict, List[Dict]]:
    rng = np.random.default_rng(stable_seed(seed, job.clip_id))
    instance = gen_object(job.class_id, rng, config)
    clip = gen_clip(instance, job.action, config.clip_length, rng, clip_id=job.clip_id)

    clip_file = f"{CLIPS_DIR}/{job.clip_id}{CONTAINER_SUFFIX}"
    inactive_file = f"{INACTIVE_DIR}/{job.inactive_id}{CONTAINER_SUFFIX}"
    save_tensor(root / clip_file, clip.frames)
    save_tensor(root / inactive_file, clip.inactive)

    obj = config.objects[job.class_id]
    clip_entry = {
        "id": job.clip_id,
        "file": clip_file,
        "object": obj,
        "action": job.action,
        "split": job.split,
        "inactive": job.inactive_id,
        "length": config.clip_length,
    }
    inactive_entry = {
        "id": job.inactive_id,
        "file": inactive_file,
        "object": obj,
        "split": job.split,
        "clip": job.clip_id,
        "keypoints": {a: [round(x, 4), round(y, 4)] for a, (x, y) in instance.keypoints.items()},
        "parts": {a: [round(v, 4) for v in instance.hotspot_box(a)] for a in instance.spec.actions},
    }
    annotations: List[Dict] = []
    if job.split == "test":
        for action in instance.spec.actions:
            for annotator, points in enumerate(annotate(instance, action, config.annotators, rng)):
                annotations.append({
                    "image_id": job.inactive_id,
                    "action": action,
                    "annotator": annotator,
                    "points": points,
                })
    return clip_entry, inactive_entry, annotations


@log_call
def gen_dataset(config: DataConfig, seed: int, out_dir: Union[str, Path]) -> DatasetManifest:
    """Write every clip, inactive image, annotation and the manifest under *out_dir*.

    Clip seeds derive from ``(seed, clip id)``, so the tree is identical for
    any ``HTK_THREADS`` value.
    """

    root = ensure_dir(out_dir)
    ensure_dir(root / CLIPS_DIR)
    ensure_dir(root / INACTIVE_DIR)
    jobs = _plan_jobs(config)
    _logger.info("🎬 Generating %d clips into %s", len(jobs), root)

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        results = list(pool.map(lambda job: _run_job(job, config, seed, root), jobs))

    clips = [r[0] for r in results]
    inactive = [r[1] for r in results]
    annotations = [a for r in results for a in r[2]]
    write_jsonl(root / ANNOTATIONS_NAME, annotations)

    manifest = DatasetManifest(
        root=root,
        actions=config.actions,
        objects=config.objects,
        affordances={obj: list(config.afforded(obj)) for obj in config.objects},
        clips=clips,
        inactive=inactive,
        seed=seed,
        config=config.to_dict(),
        config_hash=config.config_hash(),
    )
    manifest.save()
    _logger.info("✅ %s", manifest.summary())
    return manifest


# ─── Splits ──────────────────────────────────────────────────────────────────
def novel_object_split(manifest: DatasetManifest, holdout: Sequence[str]) -> Tuple[DatasetManifest, DatasetManifest]:
    """Familiar-only train manifest and unfamiliar-only test manifest."""

    holdout = tuple(holdout)
    unknown = [h for h in holdout if h not in manifest.objects]
    if unknown:
        raise ValueError(f"Unknown holdout classes: {unknown}")
    familiar = [o for o in manifest.objects if o not in holdout]
    if not holdout:
        return manifest, manifest.restrict(())
    if not familiar:
        raise ValueError("Holdout leaves no familiar object classes")
    covered = {a for o in familiar for a in manifest.affordances[o]}
    for obj in holdout:
        for action in manifest.affordances[obj]:
            if action not in covered:
                raise ValueError(f"Action {action!r} of held-out {obj!r} has no familiar exemplar")
    return manifest.restrict(familiar), manifest.restrict(holdout, unfamiliar=holdout)


def rotating_holdouts(objects: Sequence[str], n_splits: int = 3) -> List[List[str]]:
    """Partition classes into *n_splits* holdout groups covering each class once."""

    if n_splits < 1 or n_splits > len(objects):
        raise ValueError(f"n_splits must be in [1, {len(objects)}], got {n_splits}")
    groups = np.array_split(np.arange(len(objects)), n_splits)
    return [[objects[i] for i in group] for group in groups]


# ─── Training view ───────────────────────────────────────────────────────────
@dataclass
class TrainingItem:
    clip_id: str
    frames: np.ndarray                  # T×3×H×W
    action: int
    object_index: int
    inactive: Optional[np.ndarray] = None
    inactive_id: Optional[str] = None


class ClipDataset:
    """Indexable training items: clips cut into consecutive T-frame chunks."""

    def __init__(self, items: List[TrainingItem], actions: Sequence[str], objects: Sequence[str]) -> None:
        if not items:
            raise ValueError("dataset is empty")
        self.items = items
        self.actions = tuple(actions)
        self.objects = tuple(objects)
        for item in items:
            if not 0 <= item.action < len(self.actions):
                raise ValueError(f"{item.clip_id}: action index {item.action} outside vocabulary")
        shapes = {item.frames.shape for item in items}
        if len(shapes) != 1:
            raise ValueError(f"training items need one frame shape, got {sorted(shapes)}")

    @classmethod
    def from_manifest(
        cls,
        manifest: DatasetManifest,
        split: str = "train",
        chunk_length: int = CHUNK_LENGTH,
        *,
        dtype=TRAIN_DTYPE,
    ) -> "ClipDataset":
        by_id = manifest.inactive_by_id()
        items: List[TrainingItem] = []
        for entry in manifest.clip_entries(split):
            frames = manifest.load_clip(entry).astype(dtype, copy=False)
            inactive_entry = by_id.get(entry.get("inactive"))
            inactive = manifest.load_inactive(inactive_entry).astype(dtype, copy=False) if inactive_entry else None
            starts = chunk_starts(frames.shape[0], chunk_length)
            dropped = frames.shape[0] - (starts[-1] + min(chunk_length, frames.shape[0]))
            if dropped:
                _logger.debug("✂️  %s: %d trailing frames past the last full chunk dropped", entry["id"], dropped)
            for start in starts:
                items.append(TrainingItem(
                    clip_id=entry["id"] if start == 0 else f"{entry['id']}@{start}",
                    frames=frames[start:start + chunk_length],
                    action=manifest.actions.index(entry["action"]),
                    object_index=manifest.objects.index(entry["object"]),
                    inactive=inactive,
                    inactive_id=entry.get("inactive"),
                ))
        return cls(items, manifest.actions, manifest.objects)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, index: int) -> TrainingItem:
        return self.items[index]

    def batches(self, batch_size: int, rng: np.random.Generator) -> Iterator[List[int]]:
        order = rng.permutation(len(self.items))
        for start in range(0, len(order), batch_size):
            yield [int(i) for i in order[start:start + batch_size]]

    def negatives_for(self, object_index: int) -> List[int]:
        """Indices of items whose inactive image shows a different object class."""

        return [
            i for i, item in enumerate(self.items)
            if item.inactive is not None and item.object_index != object_index
        ]


def chunk_starts(length: int, chunk_length: int) -> List[int]:
    """Start offsets of consecutive chunks; a clip shorter than one chunk is kept whole."""

    if length < 1:
        raise ValueError("clip has no frames")
    if length <= chunk_length:
        return [0]
    return [k * chunk_length for k in range(length // chunk_length)]
