"""Ranking and confusion-matrix metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MetricUndefined(ValueError):
    pass


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def from_predictions(cls, labels, preds, num_classes: int) -> "ConfusionCounts":
        labels = np.asarray(labels, dtype=np.int64)
        preds = np.asarray(preds, dtype=np.int64)
        cm = confusion_matrix(labels, preds, num_classes)
        tp = np.diag(cm)
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        tn = len(labels) - tp - fp - fn
        return cls(tp, fp, fn, tn)


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, np.int64), np.asarray(preds, np.int64)), 1)
    return cm


def _binary_inputs(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("binary metrics need labels in {0, 1}")
    return s, y.astype(bool)


def auroc(scores, labels) -> float:
    """P(score+ > score-) + P(tie) / 2, via average ranks."""
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("AUROC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    s_sorted = s[order]
    ranks = np.empty(s.size)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-interpolated average precision, sum_k (R_k - R_{k-1}) * P_k.

    Tied scores form one threshold.
    """
    s, y = _binary_inputs(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricUndefined("AUPRC needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted)), s.size - 1]
    tp_at = tp[last]
    precision = tp_at / (last + 1.0)
    recall = tp_at / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def multiclass_report(probs, labels, num_classes: int) -> dict:
    """Accuracy plus macro precision/recall/F1 of argmax predictions.

    A class with no predictions (or no members) scores 0 for precision
    (recall) and still counts in the macro mean.
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    preds = p.argmax(axis=-1) if p.ndim == 2 else p.astype(np.int64)
    cc = ConfusionCounts.from_predictions(y, preds, num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        prec = np.where(cc.tp + cc.fp > 0, cc.tp / (cc.tp + cc.fp), 0.0)
        rec = np.where(cc.tp + cc.fn > 0, cc.tp / (cc.tp + cc.fn), 0.0)
        f1 = np.where(prec + rec > 0, 2 * prec * rec / (prec + rec), 0.0)
    absent = int(((cc.tp + cc.fn) == 0).sum())
    return {
        "accuracy": float(cc.tp.sum() / len(y)) if len(y) else 0.0,
        "precision": float(prec.mean()),
        "recall": float(rec.mean()),
        "f1": float(f1.mean()),
        "absent_classes": absent,
    }
