import os

import pytest

os.environ.setdefault("HTK_THREADS", "1")
os.environ.setdefault("HTK_LOG_LEVEL", "WARNING")

collect_ignore = ["examples"]

# 8px input -> 4×2×2 features; 16px -> 4×4×4. Last two stages keep stride 1.
TINY_STAGES = [[4, 3, 2, 1, 1], [4, 3, 2, 1, 1], [4, 3, 1, 2, 2], [4, 3, 1, 1, 1]]
TINY_ACTIONS = ("press", "rotate", "pull")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale end-to-end experiments (set HTK_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    from config import run_slow_tests

    if run_slow_tests():
        return
    skip = pytest.mark.skip(reason="set HTK_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def make_model():
    """Factory for tiny hotspot models."""

    from net import ConvStage, EncoderConfig, HotspotModel, ModelConfig

    def build(
        actions=TINY_ACTIONS,
        *,
        image_size=8,
        dtype="float64",
        pool="l2",
        anticipation=True,
        seed=0,
        objects=(),
    ):
        encoder = EncoderConfig(tuple(ConvStage.from_list(s) for s in TINY_STAGES), image_size=image_size)
        config = ModelConfig(
            encoder=encoder,
            actions=tuple(actions),
            objects=tuple(objects),
            pool=pool,
            anticipation=anticipation,
            dtype=dtype,
            seed=seed,
        )
        return HotspotModel(config)

    return build


@pytest.fixture(scope="session")
def tiny_data_config():
    from data import DataConfig

    return DataConfig(
        objects=("kettle", "drawer", "lamp"),
        actions=("press", "rotate"),
        train_clips=1,
        test_clips=1,
        image_size=16,
        clip_length=3,
        noise=0.01,
        annotators=2,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_data_config):
    """Generated once per session; tests must not modify it."""

    from data import gen_dataset

    return gen_dataset(tiny_data_config, 7, tmp_path_factory.mktemp("tiny_dataset"))


def dir_bytes(root):
    """Relative path → file contents for every file under *root*."""

    from pathlib import Path

    root = Path(root)
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
