"""Classifier evaluation: confusion matrices, binary scores, F-beta, MCC, macro/micro
averaging, ROC curves and AUC.

Scores whose denominator is zero are reported as ``None`` ("undefined"), never as 0.
Confusion matrices are oriented rows = true class, columns = predicted class.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class BinaryCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("counts must be non-negative")

    def __add__(self, other: "BinaryCounts") -> "BinaryCounts":
        return BinaryCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def confusion(true_labels, predicted_labels, n_classes: int) -> np.ndarray:
    t = np.asarray(true_labels, dtype=int)
    p = np.asarray(predicted_labels, dtype=int)
    if t.shape != p.shape or t.ndim != 1:
        raise ValueError("label vectors must be 1-D and equally long")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def one_vs_rest(cm, cls: int) -> BinaryCounts:
    cm = np.asarray(cm)
    tp = int(cm[cls, cls])
    fp = int(cm[:, cls].sum()) - tp
    fn = int(cm[cls, :].sum()) - tp
    tn = int(cm.sum()) - tp - fp - fn
    return BinaryCounts(tp, fp, fn, tn)


def per_class_counts(cm) -> list:
    return [one_vs_rest(cm, c) for c in range(np.asarray(cm).shape[0])]


def _ratio(num, den):
    return None if den == 0 else num / den


def accuracy(c: BinaryCounts):
    return _ratio(c.tp + c.tn, c.tp + c.fp + c.fn + c.tn)


def sensitivity(c: BinaryCounts):
    return _ratio(c.tp, c.tp + c.fn)


recall = sensitivity


def specificity(c: BinaryCounts):
    return _ratio(c.tn, c.tn + c.fp)


def precision(c: BinaryCounts):
    return _ratio(c.tp, c.tp + c.fp)


def binary_scores(c: BinaryCounts) -> dict:
    return {"accuracy": accuracy(c), "sensitivity": sensitivity(c), "specificity": specificity(c),
            "precision": precision(c), "recall": recall(c)}


def f_beta(prec, rec, beta: float = 1.0) -> float:
    """``(1 + b^2) P R / (b^2 P + R)``; 0 when both are 0."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if not (0 <= prec <= 1 and 0 <= rec <= 1):
        raise ValueError("precision and recall must lie in [0, 1]")
    b2 = beta * beta
    den = b2 * prec + rec
    return 0.0 if den == 0 else (1 + b2) * prec * rec / den


def f_beta_counts(c: BinaryCounts, beta: float = 1.0):
    """F-beta straight from counts; undefined only when TP = FP = FN = 0."""
    b2 = beta * beta
    den = (1 + b2) * c.tp + b2 * c.fn + c.fp
    return _ratio((1 + b2) * c.tp, den)


def f1(c: BinaryCounts):
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def mcc(c: BinaryCounts) -> float:
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    den = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if den == 0:
        return 0.0
    return (c.tp * c.tn - c.fp * c.fn) / math.sqrt(den)


def macro_average(counts, metric):
    """Mean of ``metric`` over classes; classes where it is undefined are skipped with a warning."""
    values = [metric(c) for c in counts]
    if not values:
        raise ValueError("need at least one class")
    defined = [v for v in values if v is not None]
    skipped = len(values) - len(defined)
    if skipped:
        warnings.warn(f"{skipped} class(es) excluded from the macro average: metric undefined",
                      RuntimeWarning, stacklevel=2)
    if not defined:
        return None
    return math.fsum(defined) / len(defined)


def micro_average(counts, metric):
    """``metric`` applied to counts pooled over classes."""
    counts = list(counts)
    if not counts:
        raise ValueError("need at least one class")
    total = counts[0]
    for c in counts[1:]:
        total = total + c
    return metric(total)


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.fpr.tolist(), self.tpr.tolist()))


def roc_curve(scores, positive) -> RocCurve:
    """ROC points sweeping the threshold over the distinct scores, highest first.

    A sample counts as predicted positive when its score is >= the threshold, so tied
    scores enter together. The first point is (0, 0) at threshold +inf; the last is (1, 1).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positive, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("ROC needs at least one positive and one negative sample")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    fp = np.cumsum(~y)[last_of_group]
    thresholds = np.r_[np.inf, s[last_of_group]]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return RocCurve(thresholds, fpr, tpr)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the ROC curve."""
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def roc_auc(scores, positive) -> float:
    return auc(roc_curve(scores, positive))


def multiclass_auc(class_aucs, n_classes: int) -> dict:
    """Two readings of the multi-class average AUC.

    ``hand_till_literal`` is ``2 / (C (C - 1)) * sum(AUC_i)`` as the formula is written (it can
    exceed 1 for C = 2); ``mean`` is the plain average ``sum(AUC_i) / C``.
    """
    aucs = list(class_aucs)
    if n_classes < 2:
        raise ValueError("multi-class AUC needs C >= 2")
    if len(aucs) != n_classes or any(a is None for a in aucs):
        raise ValueError(f"expected {n_classes} per-class AUC values")
    total = math.fsum(aucs)
    return {"hand_till_literal": 2.0 * total / (n_classes * (n_classes - 1)), "mean": total / n_classes}


def roc_csv(curve: RocCurve) -> str:
    lines = ["threshold,fpr,tpr"]
    lines += [f"{t!r},{f!r},{p!r}" for t, f, p in curve.rows()]
    return "\n".join(lines) + "\n"


def classification_summary(true_labels, predicted_labels, n_classes: int, probs=None) -> dict:
    """Per-class precision/recall/F1, macro and micro averages, macro MCC and one-vs-rest AUCs."""
    cm = confusion(true_labels, predicted_labels, n_classes)
    counts = per_class_counts(cm)
    per_class = [{"precision": precision(c), "recall": recall(c), "f1": f1(c), "support": c.tp + c.fn}
                 for c in counts]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        macro = {"precision": macro_average(counts, precision), "recall": macro_average(counts, recall),
                 "f1": macro_average(counts, f1)}
        micro = {"precision": micro_average(counts, precision), "recall": micro_average(counts, recall),
                 "f1": micro_average(counts, f1)}
    summary = {"confusion": cm.tolist(), "per_class": per_class, "macro": macro, "micro": micro,
               "mcc": math.fsum(mcc(c) for c in counts) / n_classes,
               "accuracy": _ratio(int(np.trace(cm)), int(cm.sum()))}
    if probs is not None:
        probs = np.asarray(probs, dtype=np.float64)
        truth = np.asarray(true_labels, dtype=int)
        class_aucs = []
        for c in range(n_classes):
            pos = truth == c
            class_aucs.append(roc_auc(probs[:, c], pos) if 0 < pos.sum() < len(pos) else None)
        auc_block = {"per_class": class_aucs}
        if n_classes >= 2 and all(a is not None for a in class_aucs):
            auc_block.update(multiclass_auc(class_aucs, n_classes))
        summary["auc"] = auc_block
    return summary

