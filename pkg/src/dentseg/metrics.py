"""Pixelwise binary segmentation metrics.

Every metric is computed from integer confusion counts using exact rational
arithmetic and rounded to float once, so algebraic identities such as
Dice == F1 hold bit-for-bit.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Iterable

import numpy as np

from .errors import EmptyCounts, EmptyRow, ShapeMismatch

log = logging.getLogger(__name__)

METRIC_NAMES = ("accuracy", "dice", "iou", "recall", "precision", "f1", "specificity")
AGGREGATIONS = ("micro", "macro")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for k in ("tp", "fp", "fn", "tn"):
            if int(getattr(self, k)) < 0:
                raise ValueError(f"{k} must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def to_dict(self) -> dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    dice: float
    iou: float
    recall: float
    precision: float
    f1: float
    specificity: float
    counts: ConfusionCounts
    aggregation: str = "micro"
    threshold: float = 0.5

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_dict(self) -> dict:
        out = {
            "metrics": self.metrics(),
            "counts": self.counts.to_dict(),
            "threshold": self.threshold,
            "aggregation": self.aggregation,
        }
        try:
            out["normalized_confusion_matrix"] = normalized_confusion_matrix(self.counts).tolist()
        except EmptyRow:
            out["normalized_confusion_matrix"] = None
        return out


def confusion_counts(pred_prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    """Counts with ``pred_prob > threshold`` as the predicted mask."""
    pred_prob = np.asarray(pred_prob)
    gt = np.asarray(gt)
    if pred_prob.shape != gt.shape:
        raise ShapeMismatch(f"prediction {pred_prob.shape} and ground truth {gt.shape} differ")
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    p = pred_prob > threshold
    g = gt > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p)) - tp
    fn = int(np.count_nonzero(g)) - tp
    tn = int(p.size) - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: int, den: int, vacuous: Fraction | None = None, what: str = "") -> Fraction:
    if den == 0:
        if vacuous is None:
            log.warning("%s has a zero denominator; reporting 0", what)
            return Fraction(0)
        log.warning("%s is vacuous (class absent); reporting %s", what, vacuous)
        return vacuous
    return Fraction(num, den)


def metrics_from_counts(c: ConfusionCounts, threshold: float = 0.5, aggregation: str = "micro") -> MetricsReport:
    if c.total == 0:
        raise EmptyCounts("confusion counts are all zero")
    precision = _ratio(c.tp, c.tp + c.fp, what="precision")
    recall = _ratio(c.tp, c.tp + c.fn, Fraction(1), "recall")
    specificity = _ratio(c.tn, c.tn + c.fp, Fraction(1), "specificity")
    f1 = Fraction(0) if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricsReport(
        accuracy=float(Fraction(c.tp + c.tn, c.total)),
        dice=float(_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, what="dice")),
        iou=float(_ratio(c.tp, c.tp + c.fp + c.fn, what="iou")),
        recall=float(recall),
        precision=float(precision),
        f1=float(f1),
        specificity=float(specificity),
        counts=c,
        aggregation=aggregation,
        threshold=threshold,
    )


def normalized_confusion_matrix(c: ConfusionCounts) -> np.ndarray:
    """Row-stochastic 2x2 matrix; rows are true class (background, mask)."""
    if c.tn + c.fp == 0 or c.fn + c.tp == 0:
        raise EmptyRow("a true-class row has no pixels")
    return np.array(
        [[c.tn / (c.tn + c.fp), c.fp / (c.tn + c.fp)],
         [c.fn / (c.fn + c.tp), c.tp / (c.fn + c.tp)]],
        dtype=np.float64,
    )


def aggregate(per_sample: list[ConfusionCounts], threshold: float = 0.5, aggregation: str = "micro") -> MetricsReport:
    """Micro: pool counts, compute once. Macro: average per-sample metrics."""
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"aggregation must be one of {AGGREGATIONS}")
    if not per_sample:
        raise EmptyCounts("no samples to aggregate")
    total = sum(per_sample, ConfusionCounts())
    if aggregation == "micro":
        return metrics_from_counts(total, threshold, "micro")
    reports = [metrics_from_counts(c, threshold) for c in per_sample]
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    return MetricsReport(**means, counts=total, aggregation="macro", threshold=threshold)


def evaluate_split(model, samples: Iterable, threshold: float = 0.5, aggregation: str = "micro",
                   batch_size: int = 4) -> MetricsReport:
    """Run ``model`` in infer mode over ``(image, mask)`` pairs and score them.

    ``samples`` may hold :class:`~dentseg.data.PreprocessedSample` objects or
    plain ``(image, mask)`` tuples of ``(3, H, W)`` / ``(1, H, W)`` arrays.
    """
    items = [(s.image, s.mask) if hasattr(s, "image") else tuple(s) for s in samples]
    if not items:
        raise EmptyCounts("no samples to evaluate")
    per_sample = []
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        x = np.stack([im for im, _ in chunk])
        probs = model.predict(x, batch_size=batch_size)
        for p, (_, m) in zip(probs, chunk):
            per_sample.append(confusion_counts(p, m, threshold))
    return aggregate(per_sample, threshold, aggregation)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["metrics", "counts", "threshold", "aggregation", "normalized_confusion_matrix"],
    "properties": {
        "metrics": {
            "type": "object",
            "required": list(METRIC_NAMES),
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 1} for k in METRIC_NAMES},
        },
        "counts": {
            "type": "object",
            "required": ["tp", "fp", "fn", "tn"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("tp", "fp", "fn", "tn")},
        },
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "aggregation": {"enum": list(AGGREGATIONS)},
        "normalized_confusion_matrix": {
            "oneOf": [
                {"type": "null"},
                {
                    "type": "array", "minItems": 2, "maxItems": 2,
                    "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}},
                },
            ]
        },
    },
}


def validate_report(payload: dict) -> None:
    import jsonschema

    from .errors import SchemaError

    try:
        jsonschema.validate(payload, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"metrics report invalid: {exc.message}") from exc


def report_from_dict(payload: dict) -> MetricsReport:
    validate_report(payload)
    return MetricsReport(
        **payload["metrics"],
        counts=ConfusionCounts(**payload["counts"]),
        aggregation=payload["aggregation"],
        threshold=payload["threshold"],
    )
