"""Confusion counts, F1/MCC, ROC analysis and K-fold index splitting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    # binary accessors, positive class = 1
    @property
    def tn(self) -> int:
        return int(self.counts[0, 0])

    @property
    def fp(self) -> int:
        return int(self.counts[0, 1])

    @property
    def fn(self) -> int:
        return int(self.counts[1, 0])

    @property
    def tp(self) -> int:
        return int(self.counts[1, 1])


def confusion_matrix(y_true, y_pred, n_classes: int) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_pred = np.asarray(y_pred, dtype=np.int64).ravel()
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {len(y_true)} labels vs {len(y_pred)} predictions")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if len(arr) and (arr.min() < 0 or arr.max() >= n_classes):
            bad = arr[(arr < 0) | (arr >= n_classes)][0]
            raise ValueError(f"{name} label {bad} outside 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    return ConfusionMatrix(counts)


def _check_binary(cm):
    if cm.n_classes != 2:
        raise ValueError("binary metric needs a 2x2 confusion matrix")


def f1_binary(cm: ConfusionMatrix) -> float:
    _check_binary(cm)
    tp, fp, fn = cm.tp, cm.fp, cm.fn
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def f1_degenerate(cm: ConfusionMatrix) -> bool:
    """True when F1 is undefined (no positives predicted or present)."""
    return cm.tp == cm.fp == cm.fn == 0


def _mcc_factors(cm):
    tp, tn, fp, fn = cm.tp, cm.tn, cm.fp, cm.fn
    return (tp + fp, tp + fn, tn + fp, tn + fn)


def mcc_binary(cm: ConfusionMatrix) -> float:
    _check_binary(cm)
    factors = _mcc_factors(cm)
    if 0 in factors:
        return 0.0
    num = cm.tp * cm.tn - cm.fp * cm.fn
    return num / math.sqrt(math.prod(factors))


def mcc_degenerate(cm: ConfusionMatrix) -> bool:
    return 0 in _mcc_factors(cm)


@dataclass(frozen=True, eq=False)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # score at which each point after the origin is reached
    auc: float


def roc_curve(scores, labels) -> RocCurve:
    """Sweep thresholds down through the distinct scores; ties form one step."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    tps = np.cumsum(y)
    fps = np.cumsum(~y)
    last_of_group = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tpr = np.r_[0.0, tps[last_of_group] / n_pos]
    fpr = np.r_[0.0, fps[last_of_group] / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, s[last_of_group], auc)


def auc_pairwise(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = scores[labels]
    neg = scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


class MulticlassAuroc(NamedTuple):
    macro: float
    micro: float
    per_class: list  # None where a class is absent from the labels


def auroc_multiclass(prob_matrix, labels, n_classes: Optional[int] = None) -> MulticlassAuroc:
    """One-vs-rest AUROC per class, their unweighted mean, and the pooled micro AUROC.

    Classes absent from ``labels`` get ``None`` and are left out of the macro mean.
    """
    P = np.asarray(prob_matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = P.shape[1] if n_classes is None else n_classes
    onehot = np.zeros((len(labels), k), dtype=bool)
    onehot[np.arange(len(labels)), labels] = True
    per_class = []
    for c in range(k):
        if onehot[:, c].all() or not onehot[:, c].any():
            per_class.append(None)
        else:
            per_class.append(roc_curve(P[:, c], onehot[:, c]).auc)
    defined = [a for a in per_class if a is not None]
    macro = float(np.mean(defined)) if defined else float("nan")
    micro = roc_curve(P.ravel(), onehot.ravel()).auc
    return MulticlassAuroc(macro, micro, per_class)


def multiclass_roc_curves(prob_matrix, labels, n_classes: Optional[int] = None):
    """Per-class, micro and macro ROC point sets for plotting.

    The macro curve averages per-class TPR interpolated on the union of
    their FPR grids.
    """
    P = np.asarray(prob_matrix, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = P.shape[1] if n_classes is None else n_classes
    onehot = np.zeros((len(labels), k), dtype=bool)
    onehot[np.arange(len(labels)), labels] = True
    curves = {}
    for c in range(k):
        if onehot[:, c].any() and not onehot[:, c].all():
            curves[f"class {c}"] = roc_curve(P[:, c], onehot[:, c])
    curves["micro"] = roc_curve(P.ravel(), onehot.ravel())
    per = [curves[f"class {c}"] for c in range(k) if f"class {c}" in curves]
    grid = np.unique(np.concatenate([r.fpr for r in per]))
    mean_tpr = np.maximum.accumulate(
        np.mean([np.interp(grid, r.fpr, r.tpr) for r in per], axis=0))
    curves["macro"] = RocCurve(grid, mean_tpr, np.array([]),
                               float(np.mean([r.auc for r in per])))
    return curves


def kfold_split(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Shuffle ``range(n)`` with ``seed`` and cut it into ``k`` contiguous folds.

    The first ``n % k`` folds take one extra index.
    """
    if k < 1:
        raise ValueError("K must be positive")
    if n < k:
        raise ValueError(f"cannot split {n} items into {k} folds")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    sizes = [n // k + (1 if f < n % k else 0) for f in range(k)]
    bounds = np.cumsum([0] + sizes)
    return [np.sort(perm[bounds[f]:bounds[f + 1]]) for f in range(k)]
