import json
import logging

import numpy as np
import pytest

from config import ANNOTATIONS_NAME, MANIFEST_NAME
from conftest import dir_bytes
from data import (
    ClipDataset,
    DataConfig,
    DatasetManifest,
    TrainingItem,
    chunk_starts,
    contact_frames,
    gen_clip,
    gen_dataset,
    gen_object,
    novel_object_split,
    rotating_holdouts,
    scene_spec,
    stable_seed,
)


def small_config(**overrides):
    base = dict(objects=("kettle", "drawer", "lamp"), actions=("press", "rotate"), image_size=16)
    base.update(overrides)
    return DataConfig(**base)


# ─── Configuration ───────────────────────────────────────────────────────────
@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"objects": ("kettle",)}, "two object classes"),
        ({"actions": ("press",)}, "two actions"),
        ({"objects": ("kettle", "kettle")}, "repeat"),
        ({"image_size": 8}, "at least 16"),
        ({"clip_length": 0}, "clip_length"),
        ({"noise": -0.1}, "noise"),
        ({"annotators": 0}, "annotators"),
        ({"affordances": {"sofa": ("press",)}}, "unknown object"),
        ({"affordances": {"kettle": ("lift",)}}, "unknown actions"),
    ],
)
def test_config_validation(overrides, message):
    with pytest.raises(ValueError, match=message):
        small_config(**overrides)


def test_every_action_needs_two_holders():
    with pytest.raises(ValueError, match="at least two objects"):
        small_config(affordances={"kettle": ("press",), "drawer": ("press",)})


def test_config_dict_round_trip_keeps_hash():
    cfg = small_config(affordances={"kettle": ("press",)})
    again = DataConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.config_hash() == cfg.config_hash()
    assert again.afforded("kettle") == ("press",)
    assert again.afforded("lamp") == ("press", "rotate")


def test_stable_seed_is_fixed():
    assert stable_seed(7, "train-kettle-press-000") == stable_seed(7, "train-kettle-press-000")
    assert stable_seed(7, "a") != stable_seed(8, "a")


# ─── Scenes & clips ──────────────────────────────────────────────────────────
def test_scene_layout_depends_on_class_name_only():
    cfg = small_config()
    spec = scene_spec(1, cfg)
    assert spec.object_name == "drawer"
    assert spec.actions == ("press", "rotate")
    assert len(spec.parts) == 3
    assert scene_spec(1, small_config(noise=0.2)).parts == spec.parts
    with pytest.raises(ValueError):
        scene_spec(3, cfg)


def test_object_keypoints_sit_inside_their_parts():
    instance = gen_object(0, np.random.default_rng(0), small_config())
    assert instance.image.shape == (3, 16, 16)
    assert 0.0 <= instance.image.min() and instance.image.max() <= 1.0
    for action, (x, y) in instance.keypoints.items():
        x0, y0, x1, y1 = instance.hotspot_box(action)
        assert x0 <= x <= x1 and y0 <= y <= y1


@pytest.mark.parametrize("length, expected", [(1, 1), (3, 1), (4, 2), (8, 3)])
def test_contact_frames(length, expected):
    assert contact_frames(length) == expected


def test_clip_ends_with_hand_on_hotspot():
    cfg = small_config(noise=0.0)
    rng = np.random.default_rng(1)
    instance = gen_object(2, rng, cfg)
    clip = gen_clip(instance, "rotate", 6, rng, clip_id="c")
    assert clip.frames.shape == (6, 3, 16, 16)
    target = np.asarray(instance.keypoints["rotate"])
    for point in clip.hand_path[-contact_frames(6):]:
        assert np.all(np.abs(point - target) <= 0.5)
    np.testing.assert_array_equal(clip.inactive, instance.image)
    assert not np.array_equal(clip.frames[-1], clip.inactive)


def test_first_frame_is_the_object_with_a_distant_manipulator():
    cfg = small_config(image_size=32, noise=0.0)
    radius = 0.09 * 32
    band = int(np.ceil(radius)) + 1
    for seed in range(10):
        rng = np.random.default_rng(seed)
        instance = gen_object(seed % 3, rng, cfg)
        clip = gen_clip(instance, "press", 6, rng)
        assert np.linalg.norm(clip.hand_path[0] - np.asarray(instance.keypoints["press"])) > 1.5 * radius
        changed = np.any(clip.frames[0] != instance.image, axis=0)
        interior = changed[band:-band, band:-band]
        assert not interior.any()


def test_difference_energy_peaks_in_final_third():
    cfg = small_config(image_size=32, noise=0.0)
    length = 6
    energy = np.zeros(length)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        instance = gen_object(seed % 3, rng, cfg)
        clip = gen_clip(instance, ("press", "rotate")[seed % 2], length, rng)
        energy += ((clip.frames - instance.image[None]) ** 2).sum(axis=(1, 2, 3))
    assert int(np.argmax(energy)) >= length - contact_frames(length)


def test_clip_rejects_unafforded_action():
    cfg = small_config(affordances={"kettle": ("press",)})
    instance = gen_object(0, np.random.default_rng(0), cfg)
    with pytest.raises(ValueError):
        gen_clip(instance, "rotate", 3, np.random.default_rng(0))


# ─── Dataset generation ──────────────────────────────────────────────────────
def test_dataset_layout(tiny_dataset, tiny_data_config):
    manifest = tiny_dataset
    assert (manifest.root / MANIFEST_NAME).is_file()
    assert len(manifest.clip_entries()) == 12
    assert len(manifest.clip_entries("train")) == 6
    assert len(manifest.inactive_entries("test")) == 6
    clip = manifest.load_clip(manifest.clip_entries("train")[0])
    assert clip.shape == (3, 3, 16, 16)
    records = manifest.annotation_records()
    assert len(records) == 6 * 2 * tiny_data_config.annotators
    assert {r["image_id"] for r in records} == {e["id"] for e in manifest.inactive_entries("test")}


def test_manifest_reload_matches(tiny_dataset):
    again = DatasetManifest.load(tiny_dataset.root)
    assert again.manifest_hash() == tiny_dataset.manifest_hash()
    assert again.summary() == tiny_dataset.summary()
    boxes = again.part_boxes()
    entry = again.inactive_entries()[0]
    assert len(boxes[(entry["id"], "press")]) == 4


def test_generation_is_independent_of_thread_count(tmp_path, monkeypatch, tiny_data_config):
    monkeypatch.setenv("HTK_THREADS", "1")
    one = gen_dataset(tiny_data_config, 3, tmp_path / "one")
    monkeypatch.setenv("HTK_THREADS", "4")
    four = gen_dataset(tiny_data_config, 3, tmp_path / "four")
    assert one.manifest_hash() == four.manifest_hash()
    assert dir_bytes(one.root) == dir_bytes(four.root)
    assert (one.root / ANNOTATIONS_NAME).stat().st_size > 0


def test_different_seed_changes_pixels(tmp_path, tiny_data_config, tiny_dataset):
    other = gen_dataset(tiny_data_config, 8, tmp_path)
    entry = other.clip_entries()[0]
    assert not np.array_equal(other.load_clip(entry), tiny_dataset.load_clip(entry))


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path)


def test_unsupported_manifest_format(tmp_path, tiny_dataset):
    raw = tiny_dataset.to_dict()
    raw["format"] = 99
    (tmp_path / MANIFEST_NAME).write_text(json.dumps(raw))
    with pytest.raises(ValueError, match="format"):
        DatasetManifest.load(tmp_path)


# ─── Splits ──────────────────────────────────────────────────────────────────
def test_novel_object_split(tiny_dataset):
    familiar, unfamiliar = novel_object_split(tiny_dataset, ["lamp"])
    assert {c["object"] for c in familiar.clip_entries()} == {"kettle", "drawer"}
    assert {c["object"] for c in unfamiliar.clip_entries()} == {"lamp"}
    assert unfamiliar.unfamiliar == ("lamp",)


def test_empty_holdout_keeps_everything(tiny_dataset):
    familiar, unfamiliar = novel_object_split(tiny_dataset, [])
    assert familiar is tiny_dataset
    assert unfamiliar.clip_entries() == []


def test_holdout_errors(tiny_dataset):
    with pytest.raises(ValueError, match="Unknown"):
        novel_object_split(tiny_dataset, ["sofa"])
    with pytest.raises(ValueError, match="no familiar"):
        novel_object_split(tiny_dataset, ["kettle", "drawer", "lamp"])


def test_holdout_needs_familiar_exemplar_per_action(tiny_dataset):
    manifest = tiny_dataset.restrict(tiny_dataset.objects)
    manifest.affordances = {"kettle": ["press"], "drawer": ["press"], "lamp": ["press", "rotate"]}
    with pytest.raises(ValueError, match="'rotate'"):
        novel_object_split(manifest, ["lamp"])


def test_rotating_holdouts_cover_each_class_once():
    groups = rotating_holdouts(["a", "b", "c", "d", "e"], 3)
    assert sorted(sum(groups, [])) == ["a", "b", "c", "d", "e"]
    assert len(groups) == 3
    with pytest.raises(ValueError):
        rotating_holdouts(["a", "b"], 3)


# ─── Training view ───────────────────────────────────────────────────────────
@pytest.mark.parametrize(
    "length, chunk, expected",
    [(3, 8, [0]), (8, 8, [0]), (17, 8, [0, 8]), (16, 4, [0, 4, 8, 12])],
)
def test_chunk_starts(length, chunk, expected):
    assert chunk_starts(length, chunk) == expected


def test_chunk_starts_rejects_empty_clip():
    with pytest.raises(ValueError):
        chunk_starts(0, 4)


def test_clip_dataset_from_manifest(tiny_dataset):
    dataset = ClipDataset.from_manifest(tiny_dataset, "train", chunk_length=3, dtype=np.float64)
    assert len(dataset) == 6
    item = dataset[0]
    assert item.frames.dtype == np.float64
    assert item.inactive.shape == (3, 16, 16)
    negatives = dataset.negatives_for(item.object_index)
    assert negatives and all(dataset[i].object_index != item.object_index for i in negatives)


def test_batches_cover_every_item_once(tiny_dataset):
    dataset = ClipDataset.from_manifest(tiny_dataset, "train", chunk_length=3)
    batches = list(dataset.batches(4, np.random.default_rng(0)))
    assert [len(b) for b in batches] == [4, 2]
    assert sorted(sum(batches, [])) == list(range(6))


def test_empty_dataset_is_rejected():
    with pytest.raises(ValueError):
        ClipDataset([], ("a", "b"), ("x", "y"))


def test_mixed_frame_shapes_are_rejected():
    items = [
        TrainingItem(clip_id=f"c{t}", frames=np.zeros((t, 3, 8, 8)), action=0, object_index=0)
        for t in (2, 3)
    ]
    with pytest.raises(ValueError, match="one frame shape"):
        ClipDataset(items, ("a", "b"), ("x", "y"))


def test_trailing_frames_past_last_chunk_are_logged(tiny_dataset, caplog):
    with caplog.at_level(logging.DEBUG, logger="data"):
        dataset = ClipDataset.from_manifest(tiny_dataset, "train", chunk_length=2)
    assert len(dataset) == 6
    assert all(item.frames.shape[0] == 2 for item in dataset.items)
    assert "1 trailing frames past the last full chunk dropped" in caplog.text
