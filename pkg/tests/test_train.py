import json

import numpy as np
import pytest

from checkpoint import list_epochs, load_checkpoint
from config import TRAIN_LOG_NAME
from data import ClipDataset, TrainingItem
from net import Img2HeatmapConfig, Img2HeatmapModel
from tensor import Tape, Tensor, grad_check_tensors, parameter
from train import (
    DIAGNOSTICS_NAME,
    AdamState,
    LossWeights,
    NumericalError,
    TrainConfig,
    adam_step,
    combined_loss,
    evaluate_accuracy,
    fit,
    fit_img2heatmap,
    heatmap_training_set,
    loss_ant_l2,
    select_active_frame,
    triplet_margin_loss,
)


def make_items(count=2, steps=2, size=8, seed=0, with_inactive=True):
    rng = np.random.default_rng(seed)
    return [
        TrainingItem(
            clip_id=f"clip-{i}",
            frames=rng.uniform(size=(steps, 3, size, size)),
            action=i % 3,
            object_index=i % 2,
            inactive=rng.uniform(size=(3, size, size)) if with_inactive else None,
            inactive_id=f"img-{i}" if with_inactive else None,
        )
        for i in range(count)
    ]


def make_dataset(count=4, seed=0):
    return ClipDataset(make_items(count, seed=seed), ("press", "rotate", "pull"), ("kettle", "drawer"))


# ─── Active frame ────────────────────────────────────────────────────────────
def test_select_active_frame_picks_peak_confidence():
    logits = np.array([[0.0, 0.0], [3.0, 0.0], [1.0, 0.0]])
    assert select_active_frame(logits, 0) == 1
    assert select_active_frame(logits, 1) == 0


def test_select_active_frame_breaks_ties_early():
    assert select_active_frame(np.zeros((4, 3)), 2) == 0


def test_select_active_frame_validates_action():
    with pytest.raises(ValueError):
        select_active_frame(np.zeros((2, 3)), 3)


# ─── Losses ──────────────────────────────────────────────────────────────────
def test_loss_ant_l2_is_zero_for_matching_features():
    x = Tensor(np.random.default_rng(0).uniform(size=(2, 4, 2, 2)))
    assert float(loss_ant_l2(x, Tensor(x.data.copy())).data) == pytest.approx(0.0, abs=1e-12)


def test_triplet_margin_hinge():
    a = Tensor(np.array([[1.0, 0.0]]))
    near = Tensor(np.array([[1.0, 0.0]]))
    far = Tensor(np.array([[0.0, 1.0]]))
    assert float(triplet_margin_loss(a, near, far, 0.5).data) == pytest.approx(0.0)
    assert float(triplet_margin_loss(a, far, near, 0.5).data) == pytest.approx(np.sqrt(2) + 0.5)
    with pytest.raises(ValueError):
        triplet_margin_loss(a, near, far, 0.0)


def test_combined_loss_weights_terms(make_model):
    model = make_model()
    items = make_items()
    result = combined_loss(items, model, LossWeights(cls=1.0, ant=0.1, aux=1.0))
    assert result.paired == 2
    expected = result.cls + 0.1 * result.ant + result.aux
    assert float(result.total.data) == pytest.approx(expected, rel=1e-9)
    assert len(result.active_frames) == 2


def test_combined_loss_skips_items_without_inactive(make_model, caplog):
    result = combined_loss(make_items(with_inactive=False), make_model())
    assert result.paired == 0
    assert result.ant == 0.0 and result.aux == 0.0
    assert "no paired inactive image" in caplog.text


def test_classification_only_ignores_inactive(make_model):
    result = combined_loss(make_items(), make_model(), LossWeights(ant=0.0, aux=0.0))
    assert result.paired == 0
    assert float(result.total.data) == pytest.approx(result.cls)


@pytest.mark.parametrize("mode", ["l2", "triplet"])
def test_combined_loss_gradients_match_finite_differences(make_model, mode):
    model = make_model(dtype="float64")
    items = make_items(count=2, steps=2, seed=3)
    negatives = [items[1].inactive, items[0].inactive] if mode == "triplet" else None
    weights = LossWeights(cls=1.0, ant=0.5, aux=1.0)
    target = combined_loss(items, model, weights, mode, margin=0.5, negatives=negatives).active_features

    def loss():
        return combined_loss(
            items, model, weights, mode, margin=0.5, negatives=negatives, active_features=target
        ).total

    errors = grad_check_tensors(loss, model.parameters())
    worst = max(errors, key=errors.get)
    assert errors[worst] <= 1e-4, worst


def test_active_target_carries_no_gradient(make_model):
    model = make_model()
    items = make_items(seed=5)

    def gradients(**kwargs):
        model.zero_grad()
        with Tape() as tape:
            result = combined_loss(items, model, LossWeights(ant=1.0), **kwargs)
            tape.backward(result.total)
        return result, {name: t.grad.copy() for name, t in model.parameters().items()}

    free, free_grads = gradients()
    _, pinned_grads = gradients(active_features=free.active_features.copy())
    for name, grad in free_grads.items():
        np.testing.assert_array_equal(grad, pinned_grads[name], err_msg=name)


# ─── Adam ────────────────────────────────────────────────────────────────────
def test_first_adam_step_moves_by_learning_rate():
    p = parameter(np.array([1.0, -2.0]), dtype=np.float64, name="p")
    p.grad = np.array([0.3, -5.0])
    state = AdamState()
    adam_step({"p": p}, state, lr=0.01)
    np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-6)
    assert state.step == 1


def test_adam_minimises_a_quadratic():
    theta = parameter(np.array([1.0]), dtype=np.float64, name="theta")
    state = AdamState()
    for _ in range(500):
        theta.grad = 2 * theta.data
        adam_step({"theta": theta}, state, lr=0.05)
    assert abs(theta.data[0]) < 1e-2


def test_weight_decay_joins_gradient():
    p = parameter(np.array([2.0]), dtype=np.float64, name="p")
    p.grad = np.array([0.0])
    adam_step({"p": p}, AdamState(), lr=0.1, weight_decay=0.5)
    assert p.data[0] < 2.0


def test_non_finite_gradient_leaves_parameters_untouched():
    p = parameter(np.array([1.0]), dtype=np.float64, name="p")
    q = parameter(np.array([1.0]), dtype=np.float64, name="q")
    p.grad = np.array([1.0])
    q.grad = np.array([np.nan])
    state = AdamState()
    with pytest.raises(NumericalError):
        adam_step({"p": p, "q": q}, state, lr=0.1)
    assert p.data[0] == 1.0
    assert state.step == 0


# ─── Training loop ───────────────────────────────────────────────────────────
def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(ant_loss="cosine")
    with pytest.raises(ValueError):
        LossWeights(ant=-1)


def test_fit_writes_log_and_checkpoints(tmp_path, make_model):
    cfg = TrainConfig(lr=1e-3, batch_size=2, epochs=2, seed=1)
    result = fit(make_dataset(), make_model(), cfg, out_dir=tmp_path, config_hash="h1")
    assert [r["epoch"] for r in result.log] == [1, 2]
    assert list_epochs(tmp_path) == [1, 2]
    lines = (tmp_path / TRAIN_LOG_NAME).read_text().splitlines()
    assert [json.loads(line)["config_hash"] for line in lines] == ["h1", "h1"]
    assert load_checkpoint(result.checkpoint).adam_step == 4


def test_resume_reproduces_uninterrupted_run(tmp_path, make_model):
    cfg = TrainConfig(lr=1e-3, batch_size=2, epochs=3, seed=2)
    straight = fit(make_dataset(), make_model(), cfg, out_dir=tmp_path / "straight")

    short = TrainConfig(lr=1e-3, batch_size=2, epochs=1, seed=2)
    fit(make_dataset(), make_model(), short, out_dir=tmp_path / "resumed")
    resumed = fit(make_dataset(), make_model(), cfg, out_dir=tmp_path / "resumed", resume=tmp_path / "resumed")

    assert [r["epoch"] for r in resumed.log] == [2, 3]
    for name, tensor in straight.model.parameters().items():
        np.testing.assert_array_equal(tensor.data, resumed.model.parameters()[name].data, err_msg=name)


def test_triplet_training_runs(make_model):
    cfg = TrainConfig(lr=1e-3, batch_size=2, epochs=1, ant_loss="triplet")
    result = fit(make_dataset(), make_model(), cfg)
    assert np.isfinite(result.log[0]["loss"])


def test_non_finite_loss_dumps_diagnostics(tmp_path, make_model):
    model = make_model()
    model.classifier_bias.data[:] = np.inf
    with pytest.raises(NumericalError) as info:
        fit(make_dataset(), model, TrainConfig(batch_size=2, epochs=1), out_dir=tmp_path)
    assert info.value.diagnostics == tmp_path / DIAGNOSTICS_NAME
    dump = json.loads((tmp_path / DIAGNOSTICS_NAME).read_text())
    assert dump["epoch"] == 1
    assert len(dump["items"]) == 2


def test_fit_rejects_vocabulary_mismatch(make_model):
    with pytest.raises(ValueError, match="actions"):
        fit(make_dataset(), make_model(actions=("a", "b", "c")), TrainConfig(epochs=1))


def test_evaluate_accuracy_is_a_fraction(make_model):
    accuracy = evaluate_accuracy(make_dataset(count=3), make_model(), batch_size=2)
    assert accuracy in (0.0, 1 / 3, 2 / 3, 1.0)


# ─── Img2Heatmap ─────────────────────────────────────────────────────────────
def test_heatmap_targets_peak_at_keypoints(tiny_dataset):
    samples = heatmap_training_set(tiny_dataset, "train")
    sample = samples[0]
    entry = tiny_dataset.inactive_by_id()[sample.image_id]
    for action, (x, y) in entry["keypoints"].items():
        target = sample.target[tiny_dataset.actions.index(action)]
        assert target.max() == pytest.approx(1.0)
        row, col = np.unravel_index(np.argmax(target), target.shape)
        assert abs(col - x) <= 1 and abs(row - y) <= 1


def test_fit_img2heatmap_lowers_loss(tmp_path, tiny_dataset):
    samples = heatmap_training_set(tiny_dataset, "train")
    config = Img2HeatmapConfig(actions=tiny_dataset.actions, image_size=16, channels=(4, 8), dtype="float64")
    cfg = TrainConfig(lr=1e-2, batch_size=len(samples), epochs=5, seed=0)
    result = fit_img2heatmap(samples, Img2HeatmapModel(config), cfg, out_dir=tmp_path)
    assert result.log[-1]["bce"] < result.log[0]["bce"]
    assert list_epochs(tmp_path) == [1, 2, 3, 4, 5]
