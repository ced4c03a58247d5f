"""Confusion matrix, one-vs-rest class metrics, ECE and Dice per million parameters.

Undefined metrics (zero denominators) are ``None``, never 0.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

CLASS_NAMES = ("BG", "NCR", "ED", "ET")
TUMOR = (1, 2, 3)
METRIC_NAMES = ("dice_f1", "iou", "precision", "sensitivity", "specificity")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray = field(default_factory=lambda: np.zeros((4, 4), dtype=np.int64))

    @classmethod
    def empty(cls, k: int = 4) -> "ConfusionMatrix":
        return cls(np.zeros((k, k), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, pred, truth) -> "ConfusionMatrix":
        return accumulate(self, pred, truth)

    def row_normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(self.counts.tolist())
        return buf.getvalue()


def accumulate(cm: ConfusionMatrix, pred, truth) -> ConfusionMatrix:
    """Return ``cm`` plus the voxel counts of ``(truth, pred)`` pairs."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"pred and truth sizes differ: {pred.size} vs {truth.size}")
    k = cm.num_classes
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise ValueError(f"{name} label outside [0, {k})")
    counts = np.bincount(truth.astype(np.int64) * k + pred.astype(np.int64), minlength=k * k)
    return ConfusionMatrix(cm.counts + counts.reshape(k, k))


def _ratio(num, den):
    return None if den == 0 else num / den


def one_vs_rest(cm: ConfusionMatrix, c: int) -> dict:
    m = cm.counts
    tp = int(m[c, c])
    fp = int(m[:, c].sum()) - tp
    fn = int(m[c, :].sum()) - tp
    tn = cm.total - tp - fp - fn
    return {
        "tp": tp, "fp": fp, "fn": fn, "tn": tn,
        "dice_f1": _ratio(2 * tp, 2 * tp + fp + fn),
        "iou": _ratio(tp, tp + fp + fn),
        "precision": _ratio(tp, tp + fp),
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
    }


@dataclass
class ClassMetrics:
    per_class: dict[str, dict]
    macro: dict[str, float | None]

    def to_dict(self) -> dict:
        return {"per_class": self.per_class, "tumor_macro": self.macro}


def per_class(cm: ConfusionMatrix, names=CLASS_NAMES) -> ClassMetrics:
    rows = {names[c]: one_vs_rest(cm, c) for c in range(cm.num_classes)}
    metrics = ClassMetrics(rows, {})
    metrics.macro = {k: macro_tumor(metrics, k) for k in METRIC_NAMES}
    return metrics


def macro_tumor(metrics: ClassMetrics, metric: str = "dice_f1", tumor=("NCR", "ED", "ET")):
    """Unweighted mean over the tumor classes; ``None`` if any is undefined."""
    vals = [metrics.per_class[name][metric] for name in tumor]
    if any(v is None for v in vals):
        return None
    return sum(vals) / len(vals)


@dataclass
class CalibrationReport:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray  # mean confidence per bin, nan for empty bins
    accuracy: np.ndarray
    ece: float
    overall_accuracy: float

    def to_dict(self) -> dict:
        def clean(a):
            return [None if not np.isfinite(v) else float(v) for v in a]

        return {
            "bins": len(self.counts),
            "edges": [float(e) for e in self.edges],
            "counts": [int(c) for c in self.counts],
            "mean_confidence": clean(self.confidence),
            "accuracy": clean(self.accuracy),
            "ece": float(self.ece),
            "overall_accuracy": float(self.overall_accuracy),
        }


def ece(confidence, correct, bins: int = 15) -> CalibrationReport:
    """Expected calibration error over equal-width bins on [0, 1].

    Bins are ``[i/n, (i+1)/n)`` except the last, which includes 1.0.
    """
    conf = np.asarray(confidence, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=bool).ravel()
    if conf.shape != corr.shape:
        raise ValueError("confidence and correctness sizes differ")
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise ValueError("confidences must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.clip(np.floor(conf * bins).astype(np.int64), 0, bins - 1)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    corr_sum = np.bincount(idx, weights=corr.astype(np.float64), minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = conf_sum / counts
        acc = corr_sum / counts
    n = conf.size
    occupied = counts > 0
    gap = np.abs(acc[occupied] - mean_conf[occupied])
    value = float(np.sum(counts[occupied] / n * gap)) if n else 0.0
    overall = float(corr.mean()) if n else 0.0
    return CalibrationReport(edges, counts, mean_conf, acc, value, overall)


def calibration_from_probs(probs: np.ndarray, truth: np.ndarray, bins: int = 15) -> CalibrationReport:
    """Max-probability confidence against argmax correctness; ``probs`` is ``[B, K, ...]``."""
    pred = np.argmax(probs, axis=1)
    return ece(probs.max(axis=1), pred == truth, bins)


def dice_per_million(mean_dice: float, params: int) -> float:
    if params <= 0:
        raise ValueError("params must be positive")
    return mean_dice / (params / 1e6)


def metrics_json(metrics: ClassMetrics, calibration: CalibrationReport | None = None, **extra) -> str:
    doc = metrics.to_dict()
    if calibration is not None:
        doc["calibration"] = calibration.to_dict()
    doc.update(extra)
    return json.dumps(doc, indent=2, sort_keys=True)
