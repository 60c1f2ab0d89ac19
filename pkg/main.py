#!/usr/bin/env python3
"""
Command-line entry point for the hotspot toolkit.

    gen-data   write a procedural interaction dataset
    train      fit the hotspot model (or the image-to-heatmap baseline)
    predict    hotspot maps for a dataset split: PGMs, unit-sum containers, index
    eval       KLD / SIM / AUC-J reports for predictions and baselines
    cluster    dendrogram of object classes in embedding space

Exit codes: 0 success, 1 usage/config/IO error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from checkpoint import latest_checkpoint, load_checkpoint, load_model
from config import (
    DENDROGRAM_NAME,
    LOG_LEVEL,
    MERGES_NAME,
    NEAREST_NAME,
    OVERLAYS_DIR,
    PREDICTIONS_INDEX,
    RUN_CONFIG_NAME,
    SEQUENCES_DIR,
)
from data import ClipDataset, DatasetManifest, gen_dataset, novel_object_split
from hotspot import (
    SPACES,
    center_bias_map,
    class_embeddings,
    cluster_means,
    gradcam_stack,
    img2heatmap_stack,
    nearest_classes,
    predict_clip_hotspots,
    predict_many,
)
from metrics import (
    Heatmap,
    MetricsReport,
    build_ground_truth,
    evaluate,
    format_table,
    load_annotations,
    localization_rate,
    write_report,
)
from net import HotspotModel, Img2HeatmapModel
from render import load_stack_map, write_overlay, write_sequence, write_stack
from run_config import (
    VARIANTS,
    RunConfig,
    apply_variant,
    load_run_config,
    parse_override,
    save_run_config,
    summarise_diff,
)
from train import NumericalError, evaluate_accuracy, fit, fit_img2heatmap, heatmap_training_set
from utils import configure_logging, ensure_dir, read_json, sanitize_filename_prefix, write_json_atomic, write_jsonl

_logger = logging.getLogger(__name__)

PREDICTIONS_FORMAT = 1
BASELINES = {"center": "center_bias", "gradcam": "lstm_gradcam", "img2heatmap": "img2heatmap"}
Pair = Tuple[str, str]


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1; 2 is reserved for numerical failures."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ─── Helpers ─────────────────────────────────────────────────────────────────
def _names(raw: str) -> List[str]:
    return [name.strip() for name in raw.split(",") if name.strip()]


def _split_filter(split: str) -> Optional[str]:
    return None if split == "all" else split


def _checkpoint_config(checkpoint, path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """The run config stored with *checkpoint*, then an optional file and overrides on top."""

    cfg = RunConfig.from_dict(checkpoint.run_config) if checkpoint.run_config else load_run_config()
    if path is not None:
        cfg = cfg.with_file(path)
    if overrides:
        cfg = cfg.with_overrides(dict(parse_override(text) for text in overrides))
    return cfg


def _check_vocabulary(model, manifest: DatasetManifest) -> None:
    if tuple(model.actions) != tuple(manifest.actions):
        raise ValueError(f"checkpoint actions {model.actions} differ from dataset actions {manifest.actions}")


def _require_kind(checkpoint, kind: str, what: str) -> None:
    if checkpoint.kind != kind:
        raise ValueError(f"{what} needs a {kind} checkpoint, got {checkpoint.kind}")


def _require_lstm_only(checkpoint) -> None:
    """Grad-CAM runs on the action-recognition ablation: anticipation and auxiliary weights both 0."""

    if not checkpoint.run_config:
        raise ValueError("--baseline gradcam: the checkpoint stores no run config to check its loss weights")
    weights = RunConfig.from_dict(checkpoint.run_config).loss_weights()
    if weights.ant != 0 or weights.aux != 0:
        raise ValueError(
            f"--baseline gradcam needs an LSTM-only checkpoint (loss.ant = loss.aux = 0), "
            f"got loss.ant={weights.ant:g}, loss.aux={weights.aux:g}"
        )


# ─── gen-data ────────────────────────────────────────────────────────────────
def _cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.set)
    seed = args.seed if args.seed is not None else cfg.seed
    manifest = gen_dataset(cfg.data_config(), seed, args.out)
    print(f"Dataset → {manifest.root}: {manifest.summary()}")
    return 0


# ─── train ───────────────────────────────────────────────────────────────────
def _resume_root(out: Path, cfg: RunConfig) -> Path:
    directory = latest_checkpoint(out)
    if directory is None:
        raise FileNotFoundError(f"No checkpoint to resume from under {out}")
    previous = load_checkpoint(directory)
    if previous.config_hash != cfg.config_hash():
        changes = summarise_diff(previous.run_config or {}, cfg.to_dict())
        raise ValueError(
            f"{directory} was trained with config {previous.config_hash[:12]}, "
            f"this run resolves to {cfg.config_hash()[:12]} ({changes})"
        )
    return out


def _cmd_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config, args.set)
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    if args.novel_holdout:
        cfg = cfg.with_overrides({"holdout": _names(args.novel_holdout)})
    manifest = DatasetManifest.load(args.dataset)
    familiar, _ = novel_object_split(manifest, cfg.values["holdout"])

    out = ensure_dir(args.out)
    resume = _resume_root(out, cfg) if args.resume else None
    save_run_config(out / RUN_CONFIG_NAME, cfg)
    tcfg = cfg.train_config()
    dtype = np.dtype(cfg.values["model"]["dtype"])
    _logger.info("🏋️  Training %s model, config %s", args.model, cfg.config_hash()[:12])

    if args.model == "hotspot":
        dataset = ClipDataset.from_manifest(familiar, "train", tcfg.chunk_length, dtype=dtype)
        model = HotspotModel(cfg.model_config(manifest.actions, manifest.objects, image_size=manifest.image_size))
        result = fit(
            dataset,
            model,
            tcfg,
            cfg.loss_weights(),
            out,
            resume=resume,
            run_config=cfg.to_dict(),
            config_hash=cfg.config_hash(),
        )
        if familiar.clip_entries("test"):
            held_out = ClipDataset.from_manifest(familiar, "test", tcfg.chunk_length, dtype=dtype)
            accuracy = evaluate_accuracy(held_out, result.model, tcfg.batch_size)
            _logger.info("🎯 held-out clip accuracy %.3f over %d chunks", accuracy, len(held_out))
            print(f"Held-out clip accuracy: {accuracy:.3f}")
    else:
        samples = heatmap_training_set(familiar, "train", cfg.values["metrics"]["gt_sigma_fraction"])
        model = Img2HeatmapModel(cfg.img2heatmap_config(manifest.actions, image_size=manifest.image_size))
        result = fit_img2heatmap(
            samples,
            model,
            tcfg,
            out,
            resume=resume,
            run_config=cfg.to_dict(),
            config_hash=cfg.config_hash(),
        )

    if result.checkpoint is None:
        print(f"Nothing to train: {out} already holds {tcfg.epochs} epochs")
    else:
        print(f"Checkpoint → {result.checkpoint}")
    return 0


# ─── predict ─────────────────────────────────────────────────────────────────
def _cmd_predict(args: argparse.Namespace) -> int:
    model, checkpoint = load_model(args.checkpoint)
    cfg = _checkpoint_config(checkpoint, args.config, args.set)
    manifest = DatasetManifest.load(args.dataset)
    _check_vocabulary(model, manifest)
    split = _split_filter(args.split)
    entries = manifest.inactive_entries(split)
    if not entries:
        raise ValueError(f"No inactive images in split {args.split!r}")
    out = ensure_dir(args.out)
    opts = cfg.section("hotspot")

    images = [(entry["id"], manifest.load_inactive(entry)) for entry in entries]
    if checkpoint.kind == "hotspot":
        method = "hotspots"
        stacks = predict_many(images, model, norm=opts["norm"], target=opts["target"], blur_sigma=opts["blur_sigma"])
    else:
        method = "img2heatmap"
        stacks = [img2heatmap_stack(image, model, image_id=image_id, norm=opts["norm"]) for image_id, image in images]

    written: Dict[str, Any] = {}
    for (image_id, image), stack in zip(images, stacks):
        written[image_id] = write_stack(out, stack)
        if args.overlay:
            write_overlay(out / OVERLAYS_DIR / f"{sanitize_filename_prefix(image_id)}.png", image, stack)

    sequences: Dict[str, int] = {}
    if args.clips:
        _require_kind(checkpoint, "hotspot", "--clips")
        for entry in manifest.clip_entries(split):
            frames = predict_clip_hotspots(
                manifest.load_clip(entry),
                model,
                clip_id=entry["id"],
                target=opts["target"],
                blur_sigma=opts["blur_sigma"],
            )
            write_sequence(out / SEQUENCES_DIR, entry["id"], frames)
            sequences[entry["id"]] = len(frames)

    write_json_atomic(out / PREDICTIONS_INDEX, {
        "format": PREDICTIONS_FORMAT,
        "method": method,
        "config_hash": cfg.config_hash(),
        "epoch": checkpoint.epoch,
        "split": args.split,
        "holdout": list(cfg.values["holdout"]),
        "dataset": manifest.manifest_hash(),
        "actions": list(model.actions),
        "images": written,
        "sequences": sequences,
    })
    print(f"Wrote {len(images)} × {len(model.actions)} {method} maps → {out}")
    return 0


# ─── eval ────────────────────────────────────────────────────────────────────
def _ground_truth(
    manifest: DatasetManifest,
    all_pairs: Dict[Pair, Heatmap],
    split: Optional[str],
    classes: Optional[Sequence[str]],
) -> Dict[Pair, Heatmap]:
    entries = manifest.inactive_by_id()
    keep = {
        image_id for image_id, entry in entries.items()
        if (split is None or entry["split"] == split) and (not classes or entry["object"] in classes)
    }
    selected = {pair: heat for pair, heat in all_pairs.items() if pair[0] in keep}
    if not selected:
        raise ValueError(f"No annotated pairs for split {split or 'all'} and classes {list(classes or []) or 'all'}")
    return selected


def _load_predictions(directory: Path) -> Tuple[Dict[str, Any], Dict[Pair, Heatmap]]:
    index_path = directory / PREDICTIONS_INDEX
    if not index_path.is_file():
        raise FileNotFoundError(f"No prediction index at {index_path}")
    index = read_json(index_path)
    if index.get("format") != PREDICTIONS_FORMAT:
        raise ValueError(f"{index_path}: unsupported prediction format {index.get('format')!r}")
    maps = {
        (image_id, action): load_stack_map(directory, files["map"])
        for image_id, actions in index["images"].items()
        for action, files in actions.items()
    }
    return index, maps


def _baseline_predictions(
    name: str,
    ground_truth: Dict[Pair, Heatmap],
    manifest: DatasetManifest,
    cfg: RunConfig,
    loaded: Optional[Tuple[Any, Any]],
) -> Dict[Pair, Heatmap]:
    size = manifest.image_size
    if name == "center":
        centre = center_bias_map(size, size, cfg.values["metrics"]["center_sigma_fraction"])
        return {pair: centre for pair in ground_truth}
    if loaded is None:
        raise ValueError(f"--baseline {name} needs --checkpoint")
    model, checkpoint = loaded
    _check_vocabulary(model, manifest)
    _require_kind(checkpoint, "hotspot" if name == "gradcam" else "img2heatmap", f"--baseline {name}")
    if name == "gradcam":
        _require_lstm_only(checkpoint)
    predictions: Dict[Pair, Heatmap] = {}
    for image_id in sorted({pair[0] for pair in ground_truth}):
        image = manifest.load_inactive(image_id)
        if name == "gradcam":
            stack = gradcam_stack(image, model, image_id=image_id)
        else:
            stack = img2heatmap_stack(image, model, image_id=image_id)
        predictions.update(stack.as_pairs())
    return predictions


def _localization(manifest: DatasetManifest, predictions: Dict[Pair, Heatmap], ground_truth: Dict[Pair, Heatmap]) -> Optional[float]:
    boxes = {pair: box for pair, box in manifest.part_boxes().items() if pair in ground_truth}
    try:
        return localization_rate(predictions, boxes)
    except ValueError:
        return None


def _split_label(holdout: Sequence[str], fallback: str) -> str:
    return "unfamiliar:" + "+".join(holdout) if holdout else fallback


def _cmd_eval(args: argparse.Namespace) -> int:
    if not args.predictions and not args.baseline:
        raise ValueError("eval needs --predictions and/or --baseline")
    manifest = DatasetManifest.load(args.dataset)
    loaded = load_model(args.checkpoint) if args.checkpoint else None
    if loaded is not None:
        cfg = _checkpoint_config(loaded[1], args.config, args.set)
    else:
        cfg = load_run_config(args.config, args.set)
    opts = cfg.section("metrics")
    size = manifest.image_size
    all_pairs = build_ground_truth(
        load_annotations(manifest.annotation_records()),
        size,
        size,
        opts["gt_sigma_fraction"] * size,
    )
    split = _split_filter(args.split)
    options = {
        "allow_missing": args.allow_missing,
        "kld_direction": opts["kld_direction"],
        "fpr_denominator": opts["fpr_denominator"],
        "threshold": opts["threshold"],
    }

    targets: List[Tuple[str, List[str], Optional[Tuple[Dict[str, Any], Dict[Pair, Heatmap]]]]] = []
    for raw in args.predictions or []:
        loaded_predictions = _load_predictions(Path(raw))
        holdout = list(loaded_predictions[0].get("holdout") or [])
        targets.append((_split_label(holdout, Path(raw).name), holdout, loaded_predictions))
    if not targets:
        holdout = list(cfg.values["holdout"])
        targets.append((_split_label(holdout, args.split), holdout, None))

    reports: List[MetricsReport] = []
    for label, classes, loaded_predictions in targets:
        ground_truth = _ground_truth(manifest, all_pairs, split, classes)
        if loaded_predictions is not None:
            index, predictions = loaded_predictions
            report = evaluate(
                predictions,
                ground_truth,
                method=index["method"],
                config_hash=index["config_hash"],
                split=label,
                **options,
            )
            report.localization = _localization(manifest, predictions, ground_truth)
            reports.append(report)
        if args.baseline:
            predictions = _baseline_predictions(args.baseline, ground_truth, manifest, cfg, loaded)
            report = evaluate(
                predictions,
                ground_truth,
                method=BASELINES[args.baseline],
                config_hash=loaded[1].config_hash if loaded is not None else cfg.config_hash(),
                split=label,
                **options,
            )
            report.localization = _localization(manifest, predictions, ground_truth)
            reports.append(report)

    mean_row = len(targets) > 1
    jsonl_path, text_path = write_report(reports, args.report, mean_row=mean_row)
    print(format_table(reports, mean_row=mean_row), end="")
    print(f"Report → {jsonl_path}, {text_path}")
    return 0


# ─── cluster ─────────────────────────────────────────────────────────────────
def _cmd_cluster(args: argparse.Namespace) -> int:
    model, checkpoint = load_model(args.checkpoint)
    _require_kind(checkpoint, "hotspot", "cluster")
    manifest = DatasetManifest.load(args.dataset)
    split = _split_filter(args.split)
    images_by_class: Dict[str, List[np.ndarray]] = {}
    for obj in manifest.objects:
        entries = [e for e in manifest.inactive_entries(split) if e["object"] == obj]
        if entries:
            images_by_class[obj] = [manifest.load_inactive(e) for e in entries]
    if len(images_by_class) < 2:
        raise ValueError(f"clustering needs at least two object classes, found {len(images_by_class)}")

    means = class_embeddings(model, images_by_class, space=args.space)
    dendrogram = cluster_means(means, space=args.space)
    nearest = nearest_classes(means, k=args.k)

    out = ensure_dir(args.out)
    text = dendrogram.to_text()
    try:
        (out / DENDROGRAM_NAME).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(f"Could not write {out / DENDROGRAM_NAME}: {exc}") from exc
    write_jsonl(out / MERGES_NAME, [dict(r, config_hash=checkpoint.config_hash) for r in dendrogram.to_records()])
    write_json_atomic(out / NEAREST_NAME, {
        "config_hash": checkpoint.config_hash,
        "space": args.space,
        "nearest": {label: [[name, dist] for name, dist in pairs] for label, pairs in nearest.items()},
    })
    print(text, end="")
    for label, pairs in nearest.items():
        print(f"{label}: " + ", ".join(f"{name} ({dist:.4f})" for name, dist in pairs))
    return 0


# ─── CLI ─────────────────────────────────────────────────────────────────────
def _build_cli() -> argparse.ArgumentParser:
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    common = argparse.ArgumentParser(add_help=False, parents=[verbose])
    common.add_argument("--config", help="JSON run configuration merged over the defaults")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Override one config value (JSON literal); repeatable",
    )

    parser = _Parser(description="Interaction hotspots from procedural videos")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="Dataset directory to create")
    gen.add_argument("--seed", type=int, help="Dataset seed; defaults to the config seed")
    gen.set_defaults(func=_cmd_gen_data)

    train = sub.add_parser("train", parents=[common], help="train a model, one checkpoint per epoch")
    train.add_argument("--dataset", required=True, help="Dataset directory")
    train.add_argument("--out", required=True, help="Run directory for checkpoints and logs")
    train.add_argument("--variant", choices=VARIANTS, help="Ablation rung applied to the config")
    train.add_argument("--novel-holdout", metavar="CLASSES", help="Comma-separated object classes kept out of training")
    train.add_argument("--resume", action="store_true", help="Continue from the newest checkpoint under --out")
    train.add_argument("--model", choices=("hotspot", "img2heatmap"), default="hotspot", help="Model to train")
    train.set_defaults(func=_cmd_train)

    predict = sub.add_parser("predict", parents=[common], help="write hotspot maps for a dataset split")
    predict.add_argument("--checkpoint", required=True, help="Checkpoint directory or training run directory")
    predict.add_argument("--dataset", required=True, help="Dataset directory")
    predict.add_argument("--split", choices=("train", "test", "all"), default="test", help="Inactive images to process")
    predict.add_argument("--out", required=True, help="Output directory")
    predict.add_argument("--clips", action="store_true", help="Also write per-frame maps for every clip")
    predict.add_argument("--overlay", action="store_true", help="Also write colour overlay PNGs")
    predict.set_defaults(func=_cmd_predict)

    ev = sub.add_parser("eval", parents=[common], help="score predictions and baselines")
    ev.add_argument("--dataset", required=True, help="Dataset directory with annotations")
    ev.add_argument(
        "--predictions",
        action="append",
        metavar="DIR",
        help="Prediction directory written by predict; repeat for per-split rows plus a mean",
    )
    ev.add_argument("--baseline", choices=sorted(BASELINES), help="Also score a baseline on the same pairs")
    ev.add_argument("--checkpoint", help="Checkpoint for the gradcam and img2heatmap baselines")
    ev.add_argument("--split", choices=("train", "test", "all"), default="test", help="Annotated images to score")
    ev.add_argument("--report", required=True, help="Report path; .jsonl and .txt are written")
    ev.add_argument("--allow-missing", action="store_true", help="Record unpredicted pairs instead of failing")
    ev.set_defaults(func=_cmd_eval)

    cl = sub.add_parser("cluster", parents=[verbose], help="cluster object classes by embedding")
    cl.add_argument("--checkpoint", required=True, help="Hotspot checkpoint")
    cl.add_argument("--dataset", required=True, help="Dataset directory")
    cl.add_argument("--split", choices=("train", "test", "all"), default="all", help="Inactive images to embed")
    cl.add_argument("--space", choices=SPACES, default="anticipated", help="Embedding space")
    cl.add_argument("--k", type=int, default=2, help="Nearest classes listed per class")
    cl.add_argument("--out", required=True, help="Output directory")
    cl.set_defaults(func=_cmd_cluster)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_cli()
    args = parser.parse_args(argv)
    configure_logging(logging.DEBUG if args.verbose else LOG_LEVEL)
    try:
        return args.func(args)
    except NumericalError as exc:
        where = f" (diagnostics: {exc.diagnostics})" if exc.diagnostics else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover - CLI entry point
    raise SystemExit(main())
