import numpy as np
import pytest
from PIL import Image

from hotspot import HotspotStack, normalize_map
from render import (
    heatmap_to_image,
    load_stack_map,
    overlay_image,
    stack_paths,
    write_overlay,
    write_pgm,
    write_sequence,
    write_stack,
)


def make_stack(image_id="img 1", actions=("press", "rotate"), size=4):
    maps = []
    for k, _ in enumerate(actions):
        values = np.zeros((size, size))
        values[k, k] = 3.0
        values[-1, -1] = 1.0
        maps.append(normalize_map(values, "unit_sum"))
    return HotspotStack(image_id, tuple(actions), maps)


def test_pgm_header_and_scaling(tmp_path):
    values = np.array([[0.0, 0.5], [1.0, 2.0], [0.25, 0.0]])
    path = write_pgm(tmp_path / "map.pgm", values)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 3\n255\n")
    assert len(raw) == len(b"P5\n2 3\n255\n") + 6
    np.testing.assert_array_equal(np.asarray(Image.open(path)), [[0, 64], [128, 255], [32, 0]])


def test_all_zero_map_renders_black():
    img = heatmap_to_image(np.zeros((3, 3)))
    assert img.mode == "L"
    assert not np.any(np.asarray(img))


def test_stack_paths_are_sanitised(tmp_path):
    pgm, container = stack_paths(tmp_path, "kitchen/img 1", "press")
    assert pgm == tmp_path / "kitchen-img_1" / "press.pgm"
    assert container == tmp_path / "kitchen-img_1" / "press.htk"


def test_write_stack_round_trips_unit_sum_maps(tmp_path):
    stack = make_stack()
    written = write_stack(tmp_path, stack)
    assert set(written) == {"press", "rotate"}
    for action in stack.actions:
        heat = load_stack_map(tmp_path, written[action]["map"])
        assert heat.norm == "unit_sum"
        np.testing.assert_allclose(heat.values, stack[action].values)
        assert np.asarray(Image.open(tmp_path / written[action]["pgm"])).max() == 255


def test_unit_max_stack_is_stored_unit_sum(tmp_path):
    stack = make_stack().normalized("unit_max")
    written = write_stack(tmp_path, stack)
    heat = load_stack_map(tmp_path, written["press"]["map"])
    assert heat.values.sum() == pytest.approx(1.0)


def test_write_sequence_layout(tmp_path):
    stacks = [make_stack(f"c#{t:03d}") for t in range(2)]
    paths = write_sequence(tmp_path, "clip-1", stacks)
    assert len(paths) == 4
    assert tmp_path / "clip-1" / "rotate" / "001.pgm" in paths


def test_overlay_tints_hot_pixels(tmp_path):
    stack = make_stack()
    image = np.full((3, 4, 4), 0.5)
    img = overlay_image(image, stack)
    pixels = np.asarray(img)
    assert img.size == (4, 4)
    # press peaks at (0, 0): red dominates there
    assert pixels[0, 0, 0] > pixels[0, 0, 1]
    # untouched pixels keep the grey base
    np.testing.assert_array_equal(pixels[2, 0], [128, 128, 128])
    path = write_overlay(tmp_path / "o" / "x.png", image, stack)
    with Image.open(path) as saved:
        assert saved.format == "PNG"


def test_overlay_caps_action_count():
    stack = make_stack(actions=("a", "b", "c", "d"))
    with pytest.raises(ValueError):
        overlay_image(np.zeros((3, 4, 4)), stack, actions=["a", "b", "c", "d"])
