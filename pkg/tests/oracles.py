"""Loop-based reference implementations of the metric formulas, for oracle tests."""

import math


def counts(true, pred, n):
    cm = [[0] * n for _ in range(n)]
    for t, p in zip(true, pred):
        cm[t][p] += 1
    return cm


def per_class_rates(true, pred, n):
    out = []
    for c in range(n):
        tp = sum(1 for t, p in zip(true, pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(true, pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(true, pred) if t == c and p != c)
        tn = len(true) - tp - fp - fn
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 / (1 / prec + 1 / rec) if prec and rec else 0.0
        den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        mcc = (tp * tn - fp * fn) / math.sqrt(den) if den else 0.0
        out.append({"precision": prec, "recall": rec, "f1": f1, "mcc": mcc})
    return out


def multiclass_mcc(true, pred):
    """Pearson correlation of the one-hot indicator matrices (equivalent to Gorodkin's R_K)."""
    classes = sorted(set(true) | set(pred))
    n = len(true)
    cov = lambda a, b: sum(
        sum((a[i] == c) * (b[i] == c) for i in range(n)) / n
        - (sum(a[i] == c for i in range(n)) / n) * (sum(b[i] == c for i in range(n)) / n)
        for c in classes)
    den = math.sqrt(cov(true, true) * cov(pred, pred))
    return cov(true, pred) / den if den else 0.0


def pairwise_auc(scores, positive):
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    if not pos or not neg:
        return None
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))
