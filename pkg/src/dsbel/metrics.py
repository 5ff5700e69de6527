"""Confusion-matrix metrics and ROC / precision-recall curves (malware is the positive class)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise MetricsError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsRecord:
    accuracy: float
    precision: float
    recall: float
    f1: float
    mcc: float
    auc: float = float("nan")

    def with_auc(self, auc: float) -> "MetricsRecord":
        return MetricsRecord(self.accuracy, self.precision, self.recall, self.f1, self.mcc, auc)


def _binary(a, name):
    a = np.asarray(a, dtype=np.int64).ravel()
    if a.size and not np.isin(a, (0, 1)).all():
        raise MetricsError(f"{name} must be 0/1 labels")
    return a


def confusion(pred, truth) -> ConfusionMatrix:
    pred, truth = _binary(pred, "predictions"), _binary(truth, "labels")
    if len(pred) != len(truth):
        raise MetricsError(f"length mismatch: {len(pred)} predictions, {len(truth)} labels")
    return ConfusionMatrix(
        tp=int(np.sum((pred == 1) & (truth == 1))),
        tn=int(np.sum((pred == 0) & (truth == 0))),
        fp=int(np.sum((pred == 1) & (truth == 0))),
        fn=int(np.sum((pred == 0) & (truth == 1))),
    )


def compute_metrics(cm: ConfusionMatrix) -> MetricsRecord:
    """Percent accuracy/precision/recall/F1 and MCC; zero-denominator terms are 0."""
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    tp, tn, fp, fn = cm.tp, cm.tn, cm.fp, cm.fn
    accuracy = (tp + tn) / cm.total
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    factors = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = (tp * tn - fp * fn) / math.sqrt(factors) if factors else 0.0
    return MetricsRecord(100 * accuracy, 100 * precision, 100 * recall, 100 * f1, mcc)


@dataclass
class Curve:
    x: np.ndarray
    y: np.ndarray
    thresholds: np.ndarray


def _sweep(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _binary(labels, "labels")
    if len(scores) != len(labels):
        raise MetricsError("scores and labels differ in length")
    pos = int(labels.sum())
    neg = len(labels) - pos
    if pos == 0 or neg == 0:
        raise MetricsError("AUC undefined: labels contain a single class")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    # last index of each group of equal scores
    ends = np.r_[np.flatnonzero(s[1:] != s[:-1]), len(s) - 1]
    tp = np.cumsum(l)[ends]
    fp = (ends + 1) - tp
    return s[ends], tp, fp, pos, neg


def roc_curve(scores, labels) -> Curve:
    thr, tp, fp, pos, neg = _sweep(scores, labels)
    return Curve(np.r_[0.0, fp / neg], np.r_[0.0, tp / pos], np.r_[np.inf, thr])


def roc_auc(scores, labels) -> tuple:
    """(ROC curve, trapezoid AUC) sweeping unique scores in descending order."""
    c = roc_curve(scores, labels)
    auc = float(np.sum(np.diff(c.x) * (c.y[1:] + c.y[:-1]) / 2.0))
    return c, auc


def pair_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly; ties count 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = _binary(labels, "labels")
    p, n = scores[labels == 1], scores[labels == 0]
    if len(p) == 0 or len(n) == 0:
        raise MetricsError("AUC undefined: labels contain a single class")
    diff = p[:, None] - n[None, :]
    return float((np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size)


def pr_curve(scores, labels) -> Curve:
    """Precision-recall points (recall on x) starting from recall 0, precision 1."""
    thr, tp, fp, pos, _ = _sweep(scores, labels)
    return Curve(np.r_[0.0, tp / pos], np.r_[1.0, tp / (tp + fp)], np.r_[np.inf, thr])


def evaluate_scores(pred, scores, labels) -> MetricsRecord:
    rec = compute_metrics(confusion(pred, labels))
    return rec.with_auc(roc_auc(scores, labels)[1])
