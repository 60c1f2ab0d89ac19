import json

import numpy as np
import pytest

from metrics import (
    Heatmap,
    KeypointAnnotation,
    MetricsReport,
    MissingPredictionError,
    PairResult,
    argmax_in_box,
    auc_judd,
    build_ground_truth,
    evaluate,
    format_table,
    gaussian_map,
    keypoints_to_heatmap,
    kld,
    load_annotations,
    localization_rate,
    sim,
    split_mean,
    union_gt,
    unit_max,
    unit_sum,
    write_report,
)
from tensor import ShapeError


def random_unit_sum(shape, seed):
    return unit_sum(np.random.default_rng(seed).uniform(size=shape))


def brute_force_auc(pred, gt, threshold=0.5):
    """Walk every distinct positive score from high to low and sum trapezoids."""

    positive = unit_max(gt) >= threshold
    negatives = (~positive).sum()
    points = [(0.0, 0.0)]
    for level in sorted(set(pred[positive].tolist()), reverse=True):
        tpr = np.sum(pred[positive] >= level) / positive.sum()
        fpr = np.sum(pred[~positive] >= level) / negatives
        points.append((fpr, tpr))
    points.append((1.0, 1.0))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2
    return area


# ─── Ground truth ────────────────────────────────────────────────────────────
def test_keypoint_heatmap_is_unit_sum_and_peaks_at_point():
    heat = keypoints_to_heatmap([(3.0, 5.0)], 1.5, 10, 12)
    assert heat.norm == "unit_sum"
    assert heat.values.sum() == pytest.approx(1.0)
    assert np.unravel_index(np.argmax(heat.values), heat.values.shape) == (5, 3)


def test_coincident_points_match_a_single_point():
    one = keypoints_to_heatmap([(4.0, 4.0)], 2.0, 9, 9)
    two = keypoints_to_heatmap([(4.0, 4.0), (4.0, 4.0)], 2.0, 9, 9)
    np.testing.assert_allclose(one.values, two.values, atol=1e-15)


def test_separated_points_give_two_peaks():
    heat = keypoints_to_heatmap([(2.0, 2.0), (12.0, 12.0)], 1.0, 15, 15).values
    assert heat[2, 2] == pytest.approx(heat[12, 12])
    assert heat[2, 2] > heat[7, 7] * 100


def test_keypoints_require_points():
    with pytest.raises(ValueError):
        keypoints_to_heatmap([], 1.0, 4, 4)
    with pytest.raises(ValueError):
        gaussian_map([(1.0, 1.0)], 0.0, 4, 4)


def test_union_is_idempotent_and_keeps_both_peaks():
    a = keypoints_to_heatmap([(2.0, 2.0)], 1.0, 12, 12)
    b = keypoints_to_heatmap([(9.0, 9.0)], 1.0, 12, 12)
    np.testing.assert_allclose(union_gt([a]).values, a.values)
    np.testing.assert_allclose(union_gt([a, a]).values, a.values)
    both = union_gt([a, b]).values
    assert both[2, 2] == pytest.approx(both[9, 9])
    np.testing.assert_allclose(both, union_gt([b, a]).values)


def test_union_rejects_shape_mismatch():
    with pytest.raises(ShapeError):
        union_gt([np.ones((3, 3)), np.ones((4, 4))])


def test_annotations_outside_image_are_rejected():
    ann = KeypointAnnotation("img", "press", ((20.0, 1.0),))
    with pytest.raises(ValueError, match="outside"):
        build_ground_truth([ann], 16, 16)


def test_ground_truth_merges_annotators(tmp_path):
    path = tmp_path / "annotations.jsonl"
    records = [
        {"image_id": "a", "action": "press", "annotator": 0, "points": [[3, 3]]},
        {"image_id": "a", "action": "press", "annotator": 1, "points": [[10, 10]]},
        {"image_id": "b", "action": "pull", "annotator": 0, "points": [[5, 5], [6, 6]]},
    ]
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    gt = build_ground_truth(load_annotations(path), 16, 16)
    assert list(gt) == [("a", "press"), ("b", "pull")]
    merged = gt[("a", "press")].values
    assert merged[3, 3] == pytest.approx(merged[10, 10])


def test_malformed_annotation_record():
    with pytest.raises(ValueError, match="malformed"):
        load_annotations([{"image_id": "a", "points": [[1, 1]]}])


# ─── KLD / SIM ───────────────────────────────────────────────────────────────
def test_kld_of_identical_maps_is_zero():
    p = random_unit_sum((6, 6), 0)
    assert kld(p, p) == pytest.approx(0.0, abs=1e-9)


def test_kld_delta_against_uniform_is_log_n():
    gt = np.zeros((4, 4))
    gt[1, 2] = 1.0
    pred = np.full((4, 4), 1 / 16)
    assert kld(pred, gt) == pytest.approx(np.log(16), rel=1e-9)


def test_kld_is_asymmetric_and_direction_switches():
    a = unit_sum(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = unit_sum(np.array([[4.0, 1.0], [1.0, 1.0]]))
    assert kld(a, b) != pytest.approx(kld(b, a))
    assert kld(a, b, direction="pred_gt") == pytest.approx(kld(b, a))


def test_kld_is_non_negative_on_random_maps():
    for seed in range(5):
        assert kld(random_unit_sum((5, 5), seed), random_unit_sum((5, 5), seed + 10)) >= 0


def test_metrics_reject_unnormalised_input():
    with pytest.raises(ValueError, match="unit-sum"):
        kld(np.ones((2, 2)), np.full((2, 2), 0.25))
    with pytest.raises(ValueError, match="unit-sum"):
        sim(np.full((2, 2), 0.25), np.ones((2, 2)))
    with pytest.raises(ShapeError):
        sim(np.full((2, 2), 0.25), np.full((1, 4), 0.25))


def test_sim_hand_values():
    uniform = np.full((2, 2), 0.25)
    half = np.array([[0.5, 0.5], [0.0, 0.0]])
    assert sim(uniform, half) == pytest.approx(0.5)
    assert sim(half, half) == pytest.approx(1.0)
    assert sim(half, np.array([[0.0, 0.0], [0.5, 0.5]])) == pytest.approx(0.0)


def test_sim_is_symmetric():
    a, b = random_unit_sum((4, 4), 1), random_unit_sum((4, 4), 2)
    assert sim(a, b) == pytest.approx(sim(b, a))


# ─── AUC-Judd ────────────────────────────────────────────────────────────────
def test_auc_of_binary_ground_truth_is_one():
    gt = np.zeros((4, 4))
    gt[1:3, 1:3] = 1.0
    assert auc_judd(gt, gt) == pytest.approx(1.0)


def test_auc_of_constant_prediction_is_half():
    gt = np.zeros((4, 4))
    gt[0, 0] = 1.0
    assert auc_judd(np.full((4, 4), 0.3), gt) == pytest.approx(0.5)


def test_auc_single_positive_ranked_second():
    pred = np.arange(9, dtype=float).reshape(3, 3)
    gt = np.zeros((3, 3))
    gt.flat[7] = 1.0
    # one negative (value 8) outranks the positive: TPR 1 at FPR 1/8
    assert auc_judd(pred, gt) == pytest.approx(brute_force_auc(pred, gt))
    assert auc_judd(pred, gt) == pytest.approx(1 - 1 / 8 + 1 / 16)


@pytest.mark.parametrize("seed", range(6))
def test_auc_matches_brute_force_on_random_maps(seed):
    rng = np.random.default_rng(seed)
    pred = np.round(rng.uniform(size=(8, 8)), 1)
    gt = gaussian_map([tuple(rng.uniform(1, 6, size=2))], 1.5, 8, 8)
    assert abs(auc_judd(pred, gt) - brute_force_auc(pred, gt)) <= 1e-9


def test_auc_fpr_over_all_pixels_is_not_larger():
    rng = np.random.default_rng(3)
    pred = rng.uniform(size=(6, 6))
    gt = gaussian_map([(2.0, 3.0)], 1.0, 6, 6)
    assert auc_judd(pred, gt, fpr_denominator="all") >= auc_judd(pred, gt) - 1e-12


def test_auc_without_positives_is_rejected():
    with pytest.raises(ValueError, match="no positive"):
        auc_judd(np.ones((2, 2)), np.ones((2, 2)), threshold=1.5)


# ─── Localisation ────────────────────────────────────────────────────────────
def test_argmax_in_box_uses_column_for_x():
    pred = np.zeros((8, 8))
    pred[1, 6] = 1.0
    assert argmax_in_box(pred, [5.5, 0.5, 6.5, 1.5])
    assert not argmax_in_box(pred, [0.5, 5.5, 1.5, 6.5])


def test_localization_rate_counts_boxed_pairs():
    hit = np.zeros((4, 4))
    hit[1, 1] = 1
    miss = np.zeros((4, 4))
    miss[3, 3] = 1
    predictions = {("a", "press"): hit, ("b", "press"): miss, ("c", "press"): hit}
    boxes = {("a", "press"): [0, 0, 2, 2], ("b", "press"): [0, 0, 2, 2]}
    assert localization_rate(predictions, boxes) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        localization_rate(predictions, {("z", "press"): [0, 0, 1, 1]})


# ─── Evaluation & reports ────────────────────────────────────────────────────
def three_pair_ground_truth():
    return {
        ("a", "press"): keypoints_to_heatmap([(2.0, 2.0)], 1.0, 8, 8),
        ("a", "pull"): keypoints_to_heatmap([(5.0, 5.0)], 1.0, 8, 8),
        ("b", "press"): keypoints_to_heatmap([(1.0, 6.0)], 1.0, 8, 8),
    }


def test_perfect_predictions_score_perfectly():
    gt = three_pair_ground_truth()
    report = evaluate(dict(gt), gt)
    assert report.means["kld"] == pytest.approx(0.0, abs=1e-9)
    assert report.means["sim"] == pytest.approx(1.0)
    assert report.means["auc_judd"] == pytest.approx(1.0)
    assert report.counts == {"pairs": 3, "ok": 3, "missing": 0, "no_positive": 0}


def test_report_means_equal_hand_average():
    gt = three_pair_ground_truth()
    preds = {pair: random_unit_sum((8, 8), seed) for seed, pair in enumerate(gt)}
    report = evaluate(preds, gt)
    for key, fn in (("kld", kld), ("sim", sim)):
        expected = np.mean([fn(preds[pair], gt[pair]) for pair in gt])
        assert report.means[key] == pytest.approx(expected)


def test_predictions_are_rescaled_to_unit_sum():
    gt = three_pair_ground_truth()
    scaled = {pair: heat.values * 7.0 for pair, heat in gt.items()}
    assert evaluate(scaled, gt).means["sim"] == pytest.approx(1.0)


def test_missing_predictions_fail_unless_allowed():
    gt = three_pair_ground_truth()
    preds = {("a", "press"): gt[("a", "press")]}
    with pytest.raises(MissingPredictionError):
        evaluate(preds, gt)
    report = evaluate(preds, gt, allow_missing=True)
    assert report.counts["missing"] == 2
    assert [p.status for p in report.pairs] == ["ok", "missing", "missing"]


def test_zero_prediction_becomes_uniform(caplog):
    gt = three_pair_ground_truth()
    preds = {pair: np.zeros((8, 8)) for pair in gt}
    report = evaluate(preds, gt)
    assert report.means["auc_judd"] == pytest.approx(0.5)
    assert "all zero" in caplog.text


def test_heatmap_validation():
    with pytest.raises(ValueError):
        Heatmap(np.array([[-1.0, 2.0]]))
    with pytest.raises(ValueError):
        Heatmap(np.ones((2, 2)), "unit_sum")
    with pytest.raises(ShapeError):
        Heatmap(np.ones(4))
    assert Heatmap(np.ones((2, 2))).normalized("unit_sum").values.sum() == pytest.approx(1.0)


def test_table_and_report_files(tmp_path):
    gt = three_pair_ground_truth()
    first = evaluate(dict(gt), gt, method="hotspots", split="kettle", config_hash="abc")
    second = evaluate(dict(gt), gt, method="hotspots", split="lamp", config_hash="abc")
    baseline = evaluate({p: np.ones((8, 8)) for p in gt}, gt, method="center_bias", split="kettle")

    table = format_table([first, second, baseline], mean_row=True)
    assert "hotspots" in table and "center_bias" in table
    assert table.count("mean") == 2

    jsonl, text = write_report([first, second, baseline], tmp_path / "report", mean_row=True)
    records = [json.loads(line) for line in jsonl.read_text().splitlines()]
    assert [r["type"] for r in records].count("pair") == 9
    means = [r for r in records if r["type"] == "mean"]
    assert [m["method"] for m in means] == ["hotspots", "center_bias"]
    assert means[0]["splits"] == ["kettle", "lamp"]
    assert text.read_text() == table


def test_split_mean_is_unweighted():
    a = MetricsReport("m", split="x")
    b = MetricsReport("m", split="y")
    a.pairs = [PairResult("i", "p", kld=1.0, sim=0.2, auc_judd=0.6)]
    b.pairs = [PairResult("j", "p", kld=3.0, sim=0.4, auc_judd=0.8), PairResult("k", "p", kld=3.0, sim=0.4, auc_judd=0.8)]
    row = split_mean([a, b])
    assert row["kld"] == pytest.approx(2.0)
    assert row["pairs"] == 3
