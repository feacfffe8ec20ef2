"""Classification and overlap metrics, fold assignment and metric reports.

Aggressive is the positive class throughout.
"""

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .tensor_io import make_rng

METRICS = ("roc_auc", "f1", "sensitivity", "specificity", "dice")


def roc_auc(scores, labels):
    """Probability that a random positive outscores a random negative, ties
    counting one half (Mann-Whitney U / (n_pos * n_neg))."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


class ConfusionMetrics(NamedTuple):
    f1: float
    sensitivity: float
    specificity: float
    undefined: tuple = ()


def confusion_metrics(pred, labels):
    """F1, sensitivity and specificity.  A metric whose denominator is zero
    is reported as 0.0 and its name is listed in ``undefined``."""
    pred = np.asarray(pred).astype(bool)
    labels = np.asarray(labels).astype(bool)
    if pred.shape != labels.shape or pred.size == 0:
        raise ValueError("pred and labels must be non-empty and equally shaped")
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    tn = int(np.sum(~pred & ~labels))
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return 0.0
        return num / den

    sens = ratio(tp, tp + fn, "sensitivity")
    spec = ratio(tn, tn + fp, "specificity")
    f1 = ratio(2 * tp, 2 * tp + fp + fn, "f1")
    return ConfusionMetrics(f1, sens, spec, tuple(undefined))


def dice(a, b):
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1.0."""
    a = np.asarray(a) > 0
    b = np.asarray(b) > 0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / total


def kfold_split(case_ids, folds=5, seed=0):
    """Seeded shuffle followed by round-robin assignment to ``folds`` groups."""
    case_ids = list(case_ids)
    if len(set(case_ids)) != len(case_ids):
        raise ValueError("case ids must be unique")
    if len(case_ids) < folds:
        raise ValueError(f"need at least {folds} cases, got {len(case_ids)}")
    order = make_rng(seed).permutation(len(case_ids))
    return {case_ids[j]: i % folds for i, j in enumerate(order)}


def fold_members(assignment, fold):
    return sorted(cid for cid, f in assignment.items() if f == fold)


@dataclass
class MetricsReport:
    """Per-fold metric values with mean and population std across folds."""

    per_fold: dict = field(default_factory=lambda: {m: [] for m in METRICS})
    extra: dict = field(default_factory=dict)

    def add_fold(self, **values):
        for m in METRICS:
            v = float(values[m])
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{m}={v} outside [0, 1]")
            self.per_fold[m].append(v)

    def mean(self, metric):
        return float(np.mean(self.per_fold[metric]))

    def std(self, metric):
        return float(np.std(self.per_fold[metric]))

    def to_dict(self):
        return {
            "metrics": {m: {"mean": round(self.mean(m), 12), "std": round(self.std(m), 12),
                            "per_fold": [round(v, 12) for v in self.per_fold[m]]}
                        for m in METRICS},
            **self.extra,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def table(self):
        lines = [f"{'metric':<12} {'mean':>8} {'std':>8}  per-fold"]
        for m in METRICS:
            folds = " ".join(f"{v:.3f}" for v in self.per_fold[m])
            lines.append(f"{m:<12} {self.mean(m):>8.3f} {self.std(m):>8.3f}  {folds}")
        return "\n".join(lines)


def lesion_metrics(scores, predicted, labels, dices):
    """Metrics of one fold from per-lesion aggressive scores, predicted
    binary labels, true binary labels and per-lesion Dice values."""
    cm = confusion_metrics(predicted, labels)
    labels = np.asarray(labels).astype(bool)
    auc = roc_auc(scores, labels) if 0 < labels.sum() < len(labels) else 0.5
    return {"roc_auc": auc, "f1": cm.f1, "sensitivity": cm.sensitivity,
            "specificity": cm.specificity, "dice": float(np.mean(dices))}
