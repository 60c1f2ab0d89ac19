import json
import logging

import pytest

import main as cli
from checkpoint import list_epochs
from config import DENDROGRAM_NAME, MANIFEST_NAME, NEAREST_NAME, PREDICTIONS_INDEX, RUN_CONFIG_NAME
from conftest import TINY_STAGES, dir_bytes
from main import main
from train import NumericalError


@pytest.fixture(autouse=True)
def _restore_logging():
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture(scope="module")
def run_files(tmp_path_factory, tiny_data_config):
    """A config file, a generated dataset, a one-epoch hotspot run and its LSTM-only twin."""

    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps({
        "seed": 3,
        "model": {"stages": TINY_STAGES, "dtype": "float64"},
        "img2heatmap": {"channels": [4]},
        "train": {"epochs": 1, "batch_size": 4, "chunk_length": 3},
        "data": tiny_data_config.to_dict(),
    }))
    root_logger = logging.getLogger()
    handlers, level = root_logger.handlers[:], root_logger.level
    assert main(["gen-data", "--config", str(config), "--out", str(root / "ds")]) == 0
    assert main(["train", "--config", str(config), "--dataset", str(root / "ds"), "--out", str(root / "run")]) == 0
    lstm_only = ["--set", "loss.ant=0", "--set", "loss.aux=0"]
    assert main(["train", "--config", str(config), *lstm_only, "--dataset", str(root / "ds"), "--out", str(root / "lstm")]) == 0
    root_logger.handlers[:] = handlers
    root_logger.setLevel(level)
    return {"root": root, "config": config, "dataset": root / "ds", "run": root / "run", "lstm": root / "lstm"}


# ─── Usage ───────────────────────────────────────────────────────────────────
def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--help"])
    assert info.value.code == 0
    assert "gen-data" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [[], ["train"], ["predict", "--bogus"], ["gen-data", "--out", "x", "--seed", "one"]])
def test_usage_errors_exit_with_one(argv):
    with pytest.raises(SystemExit) as info:
        main(argv)
    assert info.value.code == 1


def test_unknown_config_key_exits_with_one(tmp_path, capsys):
    code = main(["gen-data", "--out", str(tmp_path), "--set", "data.colour=red"])
    assert code == 1
    assert "Unknown config key 'data.colour'" in capsys.readouterr().err


def test_missing_dataset_exits_with_one(tmp_path, capsys):
    code = main(["train", "--dataset", str(tmp_path / "absent"), "--out", str(tmp_path / "run")])
    assert code == 1
    assert "No dataset manifest" in capsys.readouterr().err


def test_numerical_failure_exits_with_two(run_files, tmp_path, monkeypatch, capsys):
    def explode(*args, **kwargs):
        raise NumericalError("non-finite loss at epoch 1, batch 0", tmp_path / "nan_diagnostics.json")

    monkeypatch.setattr(cli, "fit", explode)
    argv = ["train", "--config", str(run_files["config"]), "--dataset", str(run_files["dataset"]), "--out", str(tmp_path)]
    assert main(argv) == 2
    assert "nan_diagnostics.json" in capsys.readouterr().err


# ─── Pipeline ────────────────────────────────────────────────────────────────
def test_gen_data_and_train_outputs(run_files):
    assert (run_files["dataset"] / MANIFEST_NAME).is_file()
    assert list_epochs(run_files["run"]) == [1]
    saved = json.loads((run_files["run"] / RUN_CONFIG_NAME).read_text())
    assert saved["seed"] == 3


def test_resume_with_finished_run_has_nothing_to_do(run_files, capsys):
    argv = [
        "train", "--config", str(run_files["config"]),
        "--dataset", str(run_files["dataset"]), "--out", str(run_files["run"]), "--resume",
    ]
    assert main(argv) == 0
    assert "Nothing to train" in capsys.readouterr().out
    assert list_epochs(run_files["run"]) == [1]


def test_resume_with_changed_config_is_refused(run_files, capsys):
    argv = [
        "train", "--config", str(run_files["config"]), "--set", "train.lr=0.5",
        "--dataset", str(run_files["dataset"]), "--out", str(run_files["run"]), "--resume",
    ]
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert "trained with config" in err
    assert "train.lr: 0.001 → 0.5" in err


def test_predict_eval_and_baselines(run_files, tmp_path):
    preds = tmp_path / "preds"
    argv = [
        "predict", "--checkpoint", str(run_files["run"]), "--dataset", str(run_files["dataset"]),
        "--out", str(preds), "--overlay", "--clips",
    ]
    assert main(argv) == 0
    index = json.loads((preds / PREDICTIONS_INDEX).read_text())
    assert index["method"] == "hotspots"
    assert index["epoch"] == 1
    assert len(index["images"]) == 6
    first = next(iter(index["images"].values()))
    assert set(first) == {"press", "rotate"}
    assert (preds / first["press"]["pgm"]).read_bytes().startswith(b"P5\n16 16\n255\n")
    assert set(index["sequences"].values()) == {3}
    assert len(list((preds / "overlays").glob("*.png"))) == 6

    report = tmp_path / "report"
    assert main(["eval", "--dataset", str(run_files["dataset"]), "--predictions", str(preds), "--report", str(report)]) == 0
    records = [json.loads(line) for line in report.with_suffix(".jsonl").read_text().splitlines()]
    summaries = [r for r in records if r.get("type") == "summary"]
    assert [r["method"] for r in summaries] == ["hotspots"]
    assert len(records) == 1 + 6 * 2
    assert "KLD" in report.with_suffix(".txt").read_text()

    for baseline, run in (("center", "run"), ("gradcam", "lstm")):
        out = tmp_path / f"report_{baseline}"
        argv = [
            "eval", "--dataset", str(run_files["dataset"]), "--baseline", baseline,
            "--checkpoint", str(run_files[run]), "--report", str(out),
        ]
        assert main(argv) == 0
        assert out.with_suffix(".jsonl").is_file()


def test_baseline_without_checkpoint_fails(run_files, tmp_path):
    argv = ["eval", "--dataset", str(run_files["dataset"]), "--baseline", "gradcam", "--report", str(tmp_path / "r")]
    assert main(argv) == 1


def test_gradcam_baseline_refuses_anticipation_checkpoint(run_files, tmp_path, capsys):
    argv = [
        "eval", "--dataset", str(run_files["dataset"]), "--baseline", "gradcam",
        "--checkpoint", str(run_files["run"]), "--report", str(tmp_path / "r"),
    ]
    assert main(argv) == 1
    assert "LSTM-only checkpoint" in capsys.readouterr().err
    assert not (tmp_path / "r.jsonl").exists()


def test_cluster_writes_dendrogram(run_files, tmp_path, capsys):
    argv = ["cluster", "--checkpoint", str(run_files["run"]), "--dataset", str(run_files["dataset"]), "--out", str(tmp_path)]
    assert main(argv) == 0
    assert (tmp_path / DENDROGRAM_NAME).read_text().startswith("+ h=")
    nearest = json.loads((tmp_path / NEAREST_NAME).read_text())
    assert set(nearest["nearest"]) == {"kettle", "drawer", "lamp"}
    assert "kettle:" in capsys.readouterr().out


def test_img2heatmap_train_and_predict(run_files, tmp_path):
    run = tmp_path / "i2h"
    argv = [
        "train", "--model", "img2heatmap", "--config", str(run_files["config"]),
        "--dataset", str(run_files["dataset"]), "--out", str(run),
    ]
    assert main(argv) == 0
    preds = tmp_path / "preds"
    assert main(["predict", "--checkpoint", str(run), "--dataset", str(run_files["dataset"]), "--out", str(preds)]) == 0
    assert json.loads((preds / PREDICTIONS_INDEX).read_text())["method"] == "img2heatmap"
    assert main(["predict", "--checkpoint", str(run), "--dataset", str(run_files["dataset"]),
                 "--out", str(tmp_path / "p2"), "--clips"]) == 1


def test_novel_holdout_is_recorded(run_files, tmp_path):
    run = tmp_path / "novel"
    argv = [
        "train", "--config", str(run_files["config"]), "--novel-holdout", "lamp",
        "--dataset", str(run_files["dataset"]), "--out", str(run),
    ]
    assert main(argv) == 0
    assert json.loads((run / RUN_CONFIG_NAME).read_text())["holdout"] == ["lamp"]
    preds = tmp_path / "preds"
    assert main(["predict", "--checkpoint", str(run), "--dataset", str(run_files["dataset"]), "--out", str(preds)]) == 0
    assert json.loads((preds / PREDICTIONS_INDEX).read_text())["holdout"] == ["lamp"]
    report = tmp_path / "report"
    assert main(["eval", "--dataset", str(run_files["dataset"]), "--predictions", str(preds), "--report", str(report)]) == 0
    records = [json.loads(line) for line in report.with_suffix(".jsonl").read_text().splitlines()]
    assert {r["split"] for r in records} == {"unfamiliar:lamp"}


def test_eval_over_several_prediction_sets_adds_mean_row(run_files, tmp_path):
    dirs = []
    for name in ("split_a", "split_b"):
        out = tmp_path / name
        assert main(["predict", "--checkpoint", str(run_files["run"]), "--dataset", str(run_files["dataset"]), "--out", str(out)]) == 0
        dirs += ["--predictions", str(out)]
    report = tmp_path / "report"
    assert main(["eval", "--dataset", str(run_files["dataset"]), *dirs, "--report", str(report)]) == 0
    records = [json.loads(line) for line in report.with_suffix(".jsonl").read_text().splitlines()]
    summaries = [r for r in records if r.get("type") == "summary"]
    assert [r["split"] for r in summaries] == ["split_a", "split_b"]
    (mean,) = [r for r in records if r.get("type") == "mean"]
    assert mean["splits"] == ["split_a", "split_b"]
    assert mean["pairs"] == 2 * summaries[0]["pairs"]
    for key in ("kld", "sim", "auc_judd"):
        assert mean[key] == pytest.approx(summaries[0][key])
    assert "mean" in report.with_suffix(".txt").read_text()


# ─── Determinism ─────────────────────────────────────────────────────────────
def test_same_seed_training_is_byte_identical(run_files, tmp_path):
    again = tmp_path / "again"
    argv = ["train", "--config", str(run_files["config"]), "--dataset", str(run_files["dataset"]), "--out", str(again)]
    assert main(argv) == 0
    assert dir_bytes(again) == dir_bytes(run_files["run"])


def test_predict_and_eval_reruns_are_byte_identical(run_files, tmp_path):
    outputs = []
    for name in ("first", "second"):
        preds = tmp_path / name / "preds"
        report = tmp_path / name / "report"
        argv = ["predict", "--checkpoint", str(run_files["run"]), "--dataset", str(run_files["dataset"]), "--out", str(preds)]
        assert main(argv) == 0
        assert main(["eval", "--dataset", str(run_files["dataset"]), "--predictions", str(preds), "--report", str(report)]) == 0
        outputs.append(dir_bytes(tmp_path / name))
    assert any(path.endswith(".pgm") for path in outputs[0])
    assert outputs[0] == outputs[1]
