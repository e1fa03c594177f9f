"""Confusion matrix and macro / balanced classification metrics.

Zero-division convention: any per-class ratio with a zero denominator is
reported as 0 (not 1, not NaN). A class that never occurs and is never
predicted therefore scores 0 precision, recall and F1 and pulls the macro
means down. Ratios and means are evaluated in exact rational arithmetic
and rounded to float once, so e.g. a macro mean of 5/6 is reported as the
nearest double to 5/6. The number of classes always comes from the label space, not
from the labels that happen to be observed.
"""

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .exceptions import EmptyMatrix, LabelOutOfRange, LengthMismatch


def confusion(preds, truths, n_classes):
    """Counts ``cm[i, j]`` of samples with true class ``i`` predicted as ``j``."""
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    truths = np.asarray(truths, dtype=np.int64).reshape(-1)
    if preds.shape != truths.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {truths.size} truths")
    for name, arr in (("prediction", preds), ("truth", truths)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
            raise LabelOutOfRange(f"{name} label outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truths, preds), 1)
    return cm


def _ratio(num, den):
    return Fraction(int(num), int(den)) if den else Fraction(0)


def _to_float(values):
    return np.array([float(v) for v in values], dtype=np.float64)


@dataclass
class MetricsReport:
    macro_f1: float
    balanced_accuracy: float
    macro_precision: float
    macro_specificity: float
    precision: np.ndarray
    recall: np.ndarray
    specificity: np.ndarray
    f1: np.ndarray

    def to_dict(self, decimals=None):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, np.ndarray):
                v = v.tolist()
            if decimals is not None:
                v = [round(x, decimals) for x in v] if isinstance(v, list) else round(v, decimals)
            d[k] = v
        return d


def compute_metrics(cm):
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    total = cm.sum()
    if total < 1:
        raise EmptyMatrix("confusion matrix has no samples")
    tp = np.diag(cm)
    fn = cm.sum(axis=1) - tp
    fp = cm.sum(axis=0) - tp
    tn = total - tp - fn - fp

    precision = [_ratio(tp[c], tp[c] + fp[c]) for c in range(len(tp))]
    recall = [_ratio(tp[c], tp[c] + fn[c]) for c in range(len(tp))]
    specificity = [_ratio(tn[c], tn[c] + fp[c]) for c in range(len(tp))]
    f1 = [2 * p * r / (p + r) if p + r else Fraction(0) for p, r in zip(precision, recall)]
    C = len(tp)
    return MetricsReport(
        macro_f1=float(sum(f1) / C),
        balanced_accuracy=float(sum(recall) / C),
        macro_precision=float(sum(precision) / C),
        macro_specificity=float(sum(specificity) / C),
        precision=_to_float(precision),
        recall=_to_float(recall),
        specificity=_to_float(specificity),
        f1=_to_float(f1),
    )


def evaluate(preds, truths, n_classes):
    return compute_metrics(confusion(preds, truths, n_classes))
