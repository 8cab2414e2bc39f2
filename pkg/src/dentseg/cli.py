"""``dentseg`` command line: prepare, train, evaluate, predict, plot.

Failures exit with status 2 and write a single JSON line to stderr::

    {"error": "MissingManifest", "message": "..."}
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .archive import load_weight_archive
from .config import ExperimentConfig, load_config
from .data import (IMAGE_SIZE, DatasetIndex, SplitAssignment, decode_png, load_dataset, load_samples,
                   preprocess_image, split_dataset)
from .errors import ConfigError, ConfigMismatch, DentSegError, MissingManifest
from .metrics import MetricsReport, evaluate_split, validate_report
from .models import build_model
from .plots import accuracy_figure, confusion_figure, save_figure
from .train import TrainingLog, load_checkpoint, restore, train

log = logging.getLogger(__name__)

SPLIT_FILE = "split.json"
SUMMARY_FILE = "summary.json"
CONFIG_ECHO = "config.txt"
RESOLVED_CONFIG = "config.resolved.txt"
LOG_FILE = "log.csv"
CHECKPOINT_FILE = "best.dsw"
METRICS_FILE = "metrics.json"
CURVE_FILE = "accuracy_curve.png"
CONFUSION_FILE = "confusion_matrix.png"
PREDICTIONS_DIR = "predictions"


@dataclass
class RunArtifacts:
    log_csv: Path
    checkpoint: Path
    metrics_json: Path
    curve_png: Path
    confusion_png: Path
    predictions_dir: Path

    def paths(self) -> list[Path]:
        return [self.log_csv, self.checkpoint, self.metrics_json, self.curve_png, self.confusion_png,
                self.predictions_dir]


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _select(index: DatasetIndex, ids: list[str]):
    by_id = index.by_id()
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigMismatch(f"{len(missing)} manifest ids are absent from the dataset, e.g. {missing[0]!r}")
    return [by_id[i] for i in ids]


def _write_mask(path: Path, prob: np.ndarray, threshold: float) -> None:
    Image.fromarray(np.where(prob > threshold, 255, 0).astype(np.uint8)).save(path)


def _write_prob(path: Path, prob: np.ndarray) -> None:
    q = np.round(np.clip(prob, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def _report_payload(report: MetricsReport, split: str) -> dict:
    payload = report.to_dict()
    validate_report(payload)
    return {**payload, "split": split}


# ----------------------------------------------------------------- commands

def cmd_prepare(dataset_root, out, seed: int = 42, ratios=(0.7, 0.1, 0.2)) -> SplitAssignment:
    """Index the dataset, write ``split.json`` and ``summary.json`` under ``out``."""
    index = load_dataset(dataset_root)
    split = split_dataset(index, ratios, seed)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / SPLIT_FILE).write_text(split.to_json(), encoding="utf-8")
    _write_json(out / SUMMARY_FILE, {
        "total": index.total_count,
        "subsets": index.subset_counts(),
        "split_sizes": {"train": len(split.train_ids), "val": len(split.val_ids), "test": len(split.test_ids)},
    })
    return split


def cmd_train(config_path) -> RunArtifacts:
    """Train one experiment end to end and write every run artifact."""
    cfg = load_config(config_path)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_ECHO).write_text(cfg.source_text, encoding="utf-8")
    # absolute paths and every default spelled out, so a rerun from any directory matches
    (out / RESOLVED_CONFIG).write_text(cfg.to_text(), encoding="utf-8")

    index = load_dataset(cfg.dataset_root)
    split = split_dataset(index, cfg.ratios, cfg.seed)
    (out / SPLIT_FILE).write_text(split.to_json(), encoding="utf-8")
    samples = load_samples(index.pairs, cfg.image_size, cfg.workers)
    data = {s.sample_id: s for s in samples}

    weights = load_weight_archive(cfg.weights_path) if cfg.weights_path else None
    model = build_model(cfg.architecture, cfg.model_config(), weights)
    meta = {
        "split": json.loads(split.to_json()),
        "image_size": cfg.image_size,
        "threshold": cfg.threshold,
        "experiment": cfg.to_dict(),
    }
    artifacts = RunArtifacts(out / LOG_FILE, out / CHECKPOINT_FILE, out / METRICS_FILE, out / CURVE_FILE,
                             out / CONFUSION_FILE, out / PREDICTIONS_DIR)
    history, best = train(model, split, data, cfg.train_config(), checkpoint_path=artifacts.checkpoint,
                          meta=meta, log_path=artifacts.log_csv)
    restore(model, best)

    test_ids, which = split.test_ids, "test"
    if not test_ids:
        log.warning("test split is empty; reporting metrics on the training split")
        test_ids, which = split.train_ids, "train"
    test_samples = [data[i] for i in test_ids]
    report = evaluate_split(model, test_samples, cfg.threshold, cfg.aggregation, cfg.batch_size)
    payload = _report_payload(report, which)
    _write_json(artifacts.metrics_json, payload)

    save_figure(accuracy_figure(history), artifacts.curve_png)
    matrix = payload["normalized_confusion_matrix"]
    save_figure(confusion_figure(matrix if matrix is not None else np.zeros((2, 2))), artifacts.confusion_png)

    artifacts.predictions_dir.mkdir(exist_ok=True)
    x = np.stack([s.image for s in test_samples])
    probs = model.predict(x, cfg.batch_size)
    for s, p in zip(test_samples, probs):
        _write_prob(artifacts.predictions_dir / f"{s.sample_id}_prob.png", p[0])
        _write_mask(artifacts.predictions_dir / f"{s.sample_id}_mask.png", p[0], cfg.threshold)
    return artifacts


def cmd_evaluate(checkpoint, dataset_root, split: str = "test", threshold: float = 0.5, manifest=None,
                 out=None, aggregation: str = "micro") -> dict:
    """Score a checkpoint on one split. The manifest comes from ``manifest`` or the checkpoint itself."""
    model, _, meta = load_checkpoint(checkpoint)
    if manifest is not None:
        try:
            assignment = SplitAssignment.from_json(Path(manifest).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise MissingManifest(f"split manifest {manifest} does not exist") from None
    elif "split" in meta:
        assignment = SplitAssignment.from_json(json.dumps(meta["split"]))
    else:
        raise MissingManifest(f"{checkpoint} carries no split manifest; pass one explicitly")
    ids = assignment.ids_for(split)
    if not ids:
        raise MissingManifest(f"split {split!r} is empty in the manifest")
    pairs = _select(load_dataset(dataset_root), ids)
    samples = load_samples(pairs, int(meta.get("image_size", IMAGE_SIZE)))
    payload = _report_payload(evaluate_split(model, samples, threshold, aggregation), split)
    out = Path(out) if out is not None else Path(checkpoint).with_name(f"metrics_{split}.json")
    _write_json(out, payload)
    return payload


def cmd_predict(checkpoint, image_path, out_path, threshold: float = 0.5) -> Path:
    """Write a {0, 255} mask PNG for one image at the checkpoint's input size."""
    model, _, meta = load_checkpoint(checkpoint)
    size = int(meta.get("image_size", IMAGE_SIZE))
    x = preprocess_image(decode_png(image_path), size)[None]
    prob = model.predict(x)[0, 0]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    _write_mask(out_path, prob, threshold)
    return out_path


def cmd_plot(log_csv, out_dir, metrics_json=None) -> list[Path]:
    """Accuracy curve from a training log, plus a confusion heatmap when a metrics report is given."""
    history = TrainingLog.read_csv(log_csv)
    out_dir = Path(out_dir)
    written = [save_figure(accuracy_figure(history), out_dir / CURVE_FILE)]
    if metrics_json is not None:
        payload = json.loads(Path(metrics_json).read_text(encoding="utf-8"))
        validate_report(payload)
        matrix = payload["normalized_confusion_matrix"]
        if matrix is None:
            matrix = np.zeros((2, 2))
        written.append(save_figure(confusion_figure(matrix), out_dir / CONFUSION_FILE))
    return written


# ---------------------------------------------------------------- argparse

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dentseg", description="Tooth segmentation on panoramic radiographs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="index a dataset and write the split manifest")
    sp.add_argument("--root", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=42)

    st = sub.add_parser("train", help="run one experiment from a config file")
    st.add_argument("--config", required=True)

    se = sub.add_parser("evaluate", help="score a checkpoint on a split")
    se.add_argument("--checkpoint", required=True)
    se.add_argument("--root", required=True)
    se.add_argument("--split", choices=("train", "val", "test"), default="test")
    se.add_argument("--threshold", type=float, default=0.5)
    se.add_argument("--manifest", help="split manifest JSON (defaults to the one stored in the checkpoint)")
    se.add_argument("--aggregation", choices=("micro", "macro"), default="micro")
    se.add_argument("--out", help="report path (default: metrics_<split>.json beside the checkpoint)")

    pr = sub.add_parser("predict", help="write a binary mask for one image")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--threshold", type=float, default=0.5)

    pl = sub.add_parser("plot", help="render curves and confusion matrix")
    pl.add_argument("--log", required=True)
    pl.add_argument("--metrics")
    pl.add_argument("--out", required=True)
    return p


def _fail(code: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": code, "message": message, **extra}) + "\n")
    return 2


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "prepare":
            split = cmd_prepare(args.root, args.out, args.seed)
            print(json.dumps({"train": len(split.train_ids), "val": len(split.val_ids),
                              "test": len(split.test_ids)}))
        elif args.command == "train":
            artifacts = cmd_train(args.config)
            print(json.dumps({k: str(v) for k, v in vars(artifacts).items()}, indent=2))
        elif args.command == "evaluate":
            payload = cmd_evaluate(args.checkpoint, args.root, args.split, args.threshold, args.manifest,
                                   args.out, args.aggregation)
            print(json.dumps(payload, indent=2, sort_keys=True))
        elif args.command == "predict":
            print(cmd_predict(args.checkpoint, args.image, args.out, args.threshold))
        elif args.command == "plot":
            for path in cmd_plot(args.log, args.out, args.metrics):
                print(path)
    except ConfigError as exc:
        return _fail(exc.code, str(exc), problems=list(exc.problems))
    except DentSegError as exc:
        return _fail(exc.code, str(exc))
    except (OSError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
