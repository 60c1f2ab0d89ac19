#!/usr/bin/env python3
"""
metrics.py

Ground truth and scoring for hotspot maps.

- Keypoints become unit-sum sums of isotropic Gaussians; several annotators'
  maps for one (image, action) are merged by pixelwise maximum.
- KLD, SIM and AUC-Judd compare a prediction to that union map.
- ``evaluate`` scores every annotated pair and aggregates by unweighted mean.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from config import AUC_THRESHOLD, GT_SIGMA_FRACTION, KLD_EPS, UNIT_SUM_TOLERANCE, worker_threads
from tensor import ShapeError
from utils import read_jsonl, write_jsonl

_logger = logging.getLogger(__name__)

NORMS = ("unit_sum", "unit_max", "raw")
KLD_DIRECTIONS = ("gt_pred", "pred_gt")
FPR_DENOMINATORS = ("negatives", "all")

Pair = Tuple[str, str]
MapLike = Union["Heatmap", np.ndarray]


# ─── Heatmaps ────────────────────────────────────────────────────────────────
def unit_sum(values: np.ndarray, *, label: str = "map") -> np.ndarray:
    """Scale to total mass 1; an all-zero map becomes uniform (with a warning)."""

    values = np.asarray(values, dtype=np.float64)
    total = values.sum()
    if total <= 0:
        _logger.warning("⚠️  %s is all zero; using a uniform map", label)
        return np.full(values.shape, 1.0 / values.size)
    return values / total


def unit_max(values: np.ndarray) -> np.ndarray:
    """Scale so the peak is 1; an all-zero map stays zero."""

    values = np.asarray(values, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    return values / peak if peak > 0 else np.zeros_like(values)


@dataclass(frozen=True)
class Heatmap:
    """Non-negative H×W grid tagged with its normalisation."""

    values: np.ndarray
    norm: str = "raw"

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ShapeError(f"heatmap must be 2-D, got shape {values.shape}")
        if self.norm not in NORMS:
            raise ValueError(f"heatmap norm must be one of {NORMS}, got {self.norm!r}")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("heatmap values must be finite and non-negative")
        if self.norm == "unit_sum" and abs(values.sum() - 1.0) > UNIT_SUM_TOLERANCE:
            raise ValueError(f"unit-sum heatmap sums to {values.sum():.9f}")
        if self.norm == "unit_max" and values.max() > 0 and abs(values.max() - 1.0) > UNIT_SUM_TOLERANCE:
            raise ValueError(f"unit-max heatmap peaks at {values.max():.9f}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def normalized(self, norm: str, *, label: str = "map") -> "Heatmap":
        if norm == self.norm:
            return self
        if norm == "unit_sum":
            return Heatmap(unit_sum(self.values, label=label), "unit_sum")
        if norm == "unit_max":
            return Heatmap(unit_max(self.values), "unit_max")
        return Heatmap(self.values, "raw")


def _values(item: MapLike) -> np.ndarray:
    return item.values if isinstance(item, Heatmap) else np.asarray(item, dtype=np.float64)


def gaussian_map(centres: Sequence[Tuple[float, float]], sigma: float, height: int, width: int) -> np.ndarray:
    """Sum of unnormalised isotropic Gaussians evaluated on the pixel grid."""

    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.zeros((height, width))
    for x, y in centres:
        out += np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / (2 * sigma * sigma))
    return out


# ─── Ground truth ────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class KeypointAnnotation:
    image_id: str
    action: str
    points: Tuple[Tuple[float, float], ...]
    annotator: int = 0

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "KeypointAnnotation":
        try:
            points = tuple((float(p[0]), float(p[1])) for p in record["points"])
            return cls(str(record["image_id"]), str(record["action"]), points, int(record.get("annotator", 0)))
        except (KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"malformed annotation record {record!r}") from exc

    def check_bounds(self, height: int, width: int) -> None:
        for x, y in self.points:
            if not (0 <= x <= width - 1 and 0 <= y <= height - 1):
                raise ValueError(f"{self.image_id}/{self.action}: point ({x}, {y}) outside {width}×{height}")


def load_annotations(source: Union[str, Path, Iterable[Dict[str, Any]]]) -> List[KeypointAnnotation]:
    records = read_jsonl(source) if isinstance(source, (str, Path)) else list(source)
    return [KeypointAnnotation.from_record(r) for r in records]


def keypoints_to_heatmap(points: Sequence[Tuple[float, float]], sigma: float, height: int, width: int) -> Heatmap:
    if not points:
        raise ValueError("keypoints_to_heatmap needs at least one point")
    return Heatmap(unit_sum(gaussian_map(points, sigma, height, width)), "unit_sum")


def union_gt(maps: Sequence[MapLike]) -> Heatmap:
    """Pixelwise maximum of every annotator's map, renormalised to unit sum."""

    if not maps:
        raise ValueError("union_gt needs at least one map")
    arrays = [_values(m) for m in maps]
    shape = arrays[0].shape
    for arr in arrays[1:]:
        if arr.shape != shape:
            raise ShapeError(f"union_gt: shapes {shape} and {arr.shape} differ")
    return Heatmap(unit_sum(np.maximum.reduce(arrays)), "unit_sum")


def build_ground_truth(
    annotations: Sequence[KeypointAnnotation],
    height: int,
    width: int,
    sigma: Optional[float] = None,
) -> Dict[Pair, Heatmap]:
    """Union heatmap per annotated (image, action) pair, ordered by first appearance."""

    sigma = sigma if sigma is not None else GT_SIGMA_FRACTION * min(height, width)
    grouped: Dict[Pair, List[Heatmap]] = {}
    for ann in annotations:
        ann.check_bounds(height, width)
        grouped.setdefault((ann.image_id, ann.action), []).append(
            keypoints_to_heatmap(ann.points, sigma, height, width)
        )
    return {pair: union_gt(maps) for pair, maps in grouped.items()}


# ─── Metrics ─────────────────────────────────────────────────────────────────
def _distribution(item: MapLike, name: str) -> np.ndarray:
    values = _values(item)
    if np.any(values < 0):
        raise ValueError(f"{name} has negative entries")
    if abs(values.sum() - 1.0) > UNIT_SUM_TOLERANCE:
        raise ValueError(f"{name} is not unit-sum (sums to {values.sum():.9f})")
    return values


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")


def kld(pred: MapLike, gt: MapLike, *, eps: float = KLD_EPS, direction: str = "gt_pred") -> float:
    """Σ gt·log(gt / (pred + ε) + ε); ``pred_gt`` swaps the roles of the two maps."""

    p = _distribution(pred, "prediction")
    q = _distribution(gt, "ground truth")
    _check_pair(p, q)
    if direction not in KLD_DIRECTIONS:
        raise ValueError(f"kld direction must be one of {KLD_DIRECTIONS}")
    if direction == "pred_gt":
        p, q = q, p
    mask = q > 0
    return float(np.sum(q[mask] * np.log(q[mask] / (p[mask] + eps) + eps)))


def sim(pred: MapLike, gt: MapLike) -> float:
    p = _distribution(pred, "prediction")
    q = _distribution(gt, "ground truth")
    _check_pair(p, q)
    return float(np.minimum(p, q).sum())


def auc_judd(
    pred: MapLike,
    gt: MapLike,
    threshold: float = AUC_THRESHOLD,
    *,
    fpr_denominator: str = "negatives",
) -> float:
    """ROC area with positives where the unit-max ground truth reaches *threshold*.

    Every distinct predicted value at a positive is a threshold; the curve runs
    from (0, 0) to (1, 1) and is integrated with the trapezoid rule.
    """

    p = _values(pred)
    g = _values(gt)
    _check_pair(p, g)
    if fpr_denominator not in FPR_DENOMINATORS:
        raise ValueError(f"fpr_denominator must be one of {FPR_DENOMINATORS}")
    positive = unit_max(g) >= threshold
    n_pos = int(positive.sum())
    if n_pos == 0:
        raise ValueError("ground truth has no positive pixels at the AUC threshold")

    pos_scores = np.sort(p[positive])
    neg_scores = np.sort(p[~positive])
    denominator = neg_scores.size if fpr_denominator == "negatives" else p.size
    levels = np.unique(pos_scores)[::-1]
    tp = pos_scores.size - np.searchsorted(pos_scores, levels, side="left")
    fp = neg_scores.size - np.searchsorted(neg_scores, levels, side="left")
    tpr = np.concatenate([[0.0], tp / n_pos, [1.0]])
    fpr = np.concatenate([[0.0], fp / denominator if denominator else np.zeros(levels.size), [1.0]])
    return float(trapezoid(tpr, fpr))


def argmax_in_box(pred: MapLike, box: Sequence[float]) -> bool:
    """Whether the peak pixel (first on ties) lies in ``[x0, y0, x1, y1]``."""

    values = _values(pred)
    row, col = np.unravel_index(int(np.argmax(values)), values.shape)
    x0, y0, x1, y1 = box
    return bool(x0 <= col <= x1 and y0 <= row <= y1)


def localization_rate(predictions: Mapping[Pair, MapLike], boxes: Mapping[Pair, Sequence[float]]) -> float:
    """Share of boxed pairs whose predicted peak falls inside the box."""

    scored = [argmax_in_box(predictions[pair], box) for pair, box in boxes.items() if pair in predictions]
    if not scored:
        raise ValueError("no predicted pair has a hotspot box")
    return float(np.mean(scored))


# ─── Reports ─────────────────────────────────────────────────────────────────
@dataclass
class PairResult:
    image_id: str
    action: str
    status: str = "ok"              # ok | missing | no_positive
    kld: Optional[float] = None
    sim: Optional[float] = None
    auc_judd: Optional[float] = None

    def to_record(self) -> Dict[str, Any]:
        return {
            "type": "pair",
            "image_id": self.image_id,
            "action": self.action,
            "status": self.status,
            "kld": self.kld,
            "sim": self.sim,
            "auc_judd": self.auc_judd,
        }


@dataclass
class MetricsReport:
    method: str
    pairs: List[PairResult] = field(default_factory=list)
    config_hash: str = ""
    split: Optional[str] = None
    options: Dict[str, Any] = field(default_factory=dict)
    localization: Optional[float] = None

    def _mean(self, key: str) -> Optional[float]:
        values = [getattr(p, key) for p in self.pairs if getattr(p, key) is not None]
        return float(np.mean(values)) if values else None

    @property
    def means(self) -> Dict[str, Optional[float]]:
        return {key: self._mean(key) for key in ("kld", "sim", "auc_judd")}

    @property
    def counts(self) -> Dict[str, int]:
        counts = {"pairs": len(self.pairs), "ok": 0, "missing": 0, "no_positive": 0}
        for p in self.pairs:
            counts[p.status] += 1
        return counts

    def summary_record(self) -> Dict[str, Any]:
        record: Dict[str, Any] = {"type": "summary", "method": self.method, "config_hash": self.config_hash}
        if self.split is not None:
            record["split"] = self.split
        record.update(self.means)
        record.update(self.counts)
        if self.localization is not None:
            record["localization"] = self.localization
        record["options"] = self.options
        return record

    def to_records(self) -> List[Dict[str, Any]]:
        return [p.to_record() for p in self.pairs] + [self.summary_record()]


def _fmt(value: Optional[float]) -> str:
    return f"{value:8.4f}" if value is not None else "       -"


def format_table(reports: Sequence[MetricsReport], *, mean_row: bool = False) -> str:
    """Fixed-width table with one row per report, plus a mean row per method when asked."""

    header = f"{'method':<24}{'split':<16}{'KLD↓':>8}{'SIM↑':>8}{'AUC-J↑':>8}{'pairs':>7}{'miss':>6}"
    lines = [header, "─" * len(header)]
    for report in reports:
        m, c = report.means, report.counts
        lines.append(
            f"{report.method:<24}{(report.split or '-'):<16}"
            f"{_fmt(m['kld'])}{_fmt(m['sim'])}{_fmt(m['auc_judd'])}{c['pairs']:>7}{c['missing']:>6}"
        )
    if mean_row and reports:
        lines.append("─" * len(header))
        for group in by_method(reports):
            row = split_mean(group)
            lines.append(
                f"{row['method']:<24}{'mean':<16}"
                f"{_fmt(row['kld'])}{_fmt(row['sim'])}{_fmt(row['auc_judd'])}{row['pairs']:>7}{row['missing']:>6}"
            )
    return "\n".join(lines) + "\n"


def by_method(reports: Sequence[MetricsReport]) -> List[List[MetricsReport]]:
    """Reports grouped by method, in order of first appearance."""

    groups: Dict[str, List[MetricsReport]] = {}
    for report in reports:
        groups.setdefault(report.method, []).append(report)
    return list(groups.values())


def split_mean(reports: Sequence[MetricsReport]) -> Dict[str, Any]:
    """Unweighted mean of each metric across per-split reports."""

    row: Dict[str, Any] = {"type": "mean", "method": reports[0].method if reports else ""}
    for key in ("kld", "sim", "auc_judd"):
        values = [r.means[key] for r in reports if r.means[key] is not None]
        row[key] = float(np.mean(values)) if values else None
    row["pairs"] = sum(r.counts["pairs"] for r in reports)
    row["missing"] = sum(r.counts["missing"] for r in reports)
    row["splits"] = [r.split for r in reports]
    return row


def write_report(reports: Sequence[MetricsReport], path: Union[str, Path], *, mean_row: bool = False) -> Tuple[Path, Path]:
    """``<path>.jsonl`` with every pair and summary record, ``<path>.txt`` with the table."""

    base = Path(path)
    if base.suffix in (".jsonl", ".txt"):
        base = base.with_suffix("")
    base.parent.mkdir(parents=True, exist_ok=True)
    records: List[Dict[str, Any]] = []
    for report in reports:
        for record in report.to_records():
            if report.split is not None:
                record["split"] = report.split
            records.append(record)
    if mean_row and reports:
        for group in by_method(reports):
            mean = split_mean(group)
            mean["config_hash"] = group[0].config_hash
            records.append(mean)
    jsonl_path = base.with_suffix(".jsonl")
    text_path = base.with_suffix(".txt")
    write_jsonl(jsonl_path, records)
    try:
        text_path.write_text(format_table(reports, mean_row=mean_row), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"Could not write {text_path}: {exc}") from exc
    return jsonl_path, text_path


class MissingPredictionError(ValueError):
    """Annotated pairs without predictions while missing pairs are not allowed."""


def _score_pair(
    pair: Pair,
    pred: MapLike,
    gt: Heatmap,
    kld_direction: str,
    fpr_denominator: str,
    threshold: float,
) -> PairResult:
    label = f"prediction {pair[0]}/{pair[1]}"
    p = pred.normalized("unit_sum", label=label) if isinstance(pred, Heatmap) else Heatmap(unit_sum(pred, label=label), "unit_sum")
    result = PairResult(pair[0], pair[1])
    result.kld = kld(p, gt, direction=kld_direction)
    result.sim = sim(p, gt)
    try:
        result.auc_judd = auc_judd(p, gt, threshold, fpr_denominator=fpr_denominator)
    except ValueError:
        _logger.warning("⚠️  %s/%s: ground truth has no positives; excluded from AUC-J", *pair)
        result.status = "no_positive"
    return result


def evaluate(
    predictions: Mapping[Pair, MapLike],
    ground_truth: Mapping[Pair, Heatmap],
    *,
    method: str = "hotspots",
    allow_missing: bool = False,
    kld_direction: str = "gt_pred",
    fpr_denominator: str = "negatives",
    threshold: float = AUC_THRESHOLD,
    config_hash: str = "",
    split: Optional[str] = None,
) -> MetricsReport:
    """Score every annotated pair; predictions are rescaled to unit sum first."""

    missing = [pair for pair in ground_truth if pair not in predictions]
    if missing:
        _logger.warning("⚠️  %d annotated pair(s) have no prediction, e.g. %s/%s", len(missing), *missing[0])
        if not allow_missing:
            raise MissingPredictionError(
                f"{len(missing)} annotated (image, action) pairs have no prediction; first is {missing[0]}"
            )
    present = [pair for pair in ground_truth if pair in predictions]

    def score(pair: Pair) -> PairResult:
        return _score_pair(pair, predictions[pair], ground_truth[pair], kld_direction, fpr_denominator, threshold)

    with ThreadPoolExecutor(max_workers=worker_threads()) as pool:
        scored = dict(zip(present, pool.map(score, present)))

    pairs = [scored[pair] if pair in scored else PairResult(pair[0], pair[1], "missing") for pair in ground_truth]
    report = MetricsReport(
        method=method,
        pairs=pairs,
        config_hash=config_hash,
        split=split,
        options={"kld_direction": kld_direction, "fpr_denominator": fpr_denominator, "threshold": threshold},
    )
    means = report.means
    _logger.info(
        "📊 %s: KLD %s  SIM %s  AUC-J %s over %d pairs",
        method,
        _fmt(means["kld"]).strip(),
        _fmt(means["sim"]).strip(),
        _fmt(means["auc_judd"]).strip(),
        report.counts["ok"] + report.counts["no_positive"],
    )
    return report
