"""Confusion matrix, accuracy / precision / recall / F1, MCC and one-vs-rest ROC AUC.

Per-class "accuracy" is class-conditional accuracy, i.e. the recall of that
class (diagonal over row sum). Zero denominators give 0 with a warning.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from spheremetric.errors import ContractError


def confusion_matrix(true_labels, predicted_labels, n: int) -> np.ndarray:
    t = np.asarray(true_labels, dtype=int).reshape(-1)
    p = np.asarray(predicted_labels, dtype=int).reshape(-1)
    if t.shape != p.shape:
        raise ContractError(f"{len(t)} true labels but {len(p)} predictions")
    for name, arr in (("true", t), ("predicted", p)):
        bad = np.flatnonzero((arr < 0) | (arr >= n))
        if bad.size:
            raise ContractError(f"{name} label {arr[bad[0]]} at position {bad[0]} outside [0, {n})")
    cm = np.zeros((n, n), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _ratio(num, den, what, degenerate):
    if den == 0:
        degenerate.append(what)
        return 0.0
    return num / den


@dataclass
class MetricsReport:
    confusion: list[list[int]]
    per_class_accuracy: list[float]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    average_accuracy: float
    macro_f1: float
    micro_f1: float
    per_class_mcc: list[float] = field(default_factory=list)
    mcc: float = 0.0
    per_class_auc: list[float | None] = field(default_factory=list)
    average_auc: float | None = None

    def to_dict(self):
        return asdict(self)


def classification_report(cm) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ContractError("classification report needs at least one sample")
    diag = np.diag(cm)
    rows, cols = cm.sum(axis=1), cm.sum(axis=0)
    degenerate: list[str] = []
    precision, recall, f1 = [], [], []
    for c in range(len(cm)):
        p = _ratio(int(diag[c]), int(cols[c]), f"precision[{c}]", degenerate)
        r = _ratio(int(diag[c]), int(rows[c]), f"recall[{c}]", degenerate)
        precision.append(p)
        recall.append(r)
        f1.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    if degenerate:
        warnings.warn(f"degenerate classes, rates set to 0: {', '.join(degenerate)}", stacklevel=2)
    acc = int(diag.sum()) / total
    per_class_mcc, multi = mcc(cm)
    return MetricsReport(
        confusion=cm.tolist(),
        per_class_accuracy=list(recall),
        precision=precision,
        recall=recall,
        f1=f1,
        average_accuracy=acc,
        macro_f1=float(np.mean(f1)),
        micro_f1=acc,
        per_class_mcc=per_class_mcc,
        mcc=multi,
    )


def binary_mcc(tp, tn, fp, fn) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(den)


def mcc(cm) -> tuple[list[float], float]:
    """One-vs-rest binary MCC per class, and the multiclass (Gorodkin) MCC."""
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ContractError("MCC needs at least one sample")
    per_class = []
    for c in range(len(cm)):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        per_class.append(binary_mcc(tp, tn, fp, fn))
    t = cm.sum(axis=1).astype(float)
    p = cm.sum(axis=0).astype(float)
    correct = float(np.trace(cm))
    s = float(total)
    den = (s * s - p @ p) * (s * s - t @ t)
    multi = 0.0 if den == 0 else (correct * s - t @ p) / math.sqrt(den)
    return per_class, float(multi)


def binary_auc(scores, positive) -> float | None:
    """Trapezoidal ROC area; tied scores form one threshold step (== Mann-Whitney U / PN)."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positive[order]
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y)[last_of_group]
    fps = np.cumsum(~y)[last_of_group]
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def roc_auc(scores, true_labels) -> tuple[list[float | None], float | None]:
    """Per-class one-vs-rest AUC (None where undefined) and their unweighted mean."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(true_labels, dtype=int)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ContractError(f"scores shape {scores.shape} does not match {len(labels)} labels")
    per_class = [binary_auc(scores[:, c], labels == c) for c in range(scores.shape[1])]
    defined = [a for a in per_class if a is not None]
    return per_class, (float(np.mean(defined)) if defined else None)


def full_report(true_labels, predicted_labels, scores, n: int) -> MetricsReport:
    report = classification_report(confusion_matrix(true_labels, predicted_labels, n))
    report.per_class_auc, report.average_auc = roc_auc(scores, true_labels)
    return report
