"""Comparison predictors: partial SAPS-II / SOFA scores, Gaussian NB, logistic regression."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Optional, Sequence

import numpy as np

from .data import CHANNEL_PROFILES, VitalChannel
from .preprocess import ChannelGrid

TABLE_FORMAT = "icu-lstm-pointtable/1"
AGE_RANGE = (0.0, 130.0)
VAR_FLOOR = 1e-9

SAPS2_NOT_ASSESSED = ("pao2_fio2", "urine_output", "potassium", "sodium", "bicarbonate",
                      "chronic_disease", "admission_type")
SOFA_NOT_ASSESSED = ("respiration", "coagulation", "renal")


class ScoreInputError(ValueError):
    pass


@dataclass(frozen=True)
class PointBand:
    lower: float
    upper: float
    points: int

    def contains(self, x: float) -> bool:
        return self.lower <= x < self.upper


@dataclass(frozen=True)
class PointTable:
    name: str
    # component -> (source field, bands)
    components: dict

    def points(self, component: str, x: float) -> int:
        source, bands = self.components[component]
        for band in bands:
            if band.contains(x):
                return band.points
        raise ScoreInputError(f"{component}: value {x} not covered by the {self.name} table")


def parse_point_table(text: str) -> PointTable:
    lines = text.splitlines()
    meta = {}
    body = []
    for line in lines:
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta.setdefault(key.strip(), value.strip())
        elif line.strip():
            body.append(line)
    if meta.get("format") != TABLE_FORMAT:
        raise ValueError(f"unsupported point-table format {meta.get('format')!r}")
    reader = csv.DictReader(body)
    components = {}
    for row in reader:
        lower = float(row["lower"]) if row["lower"] else -math.inf
        upper = float(row["upper"]) if row["upper"] else math.inf
        source, bands = components.setdefault(row["component"], (row["source"], []))
        if source != row["source"]:
            raise ValueError(f"component {row['component']} mixes sources")
        bands.append(PointBand(lower, upper, int(row["points"])))
    for name, (_, bands) in components.items():
        bands.sort(key=lambda b: b.lower)
        for a, b in zip(bands, bands[1:]):
            if a.upper != b.lower:
                raise ValueError(f"component {name}: bands leave a gap or overlap at {a.upper}")
        if bands[0].lower != -math.inf or bands[-1].upper != math.inf:
            raise ValueError(f"component {name}: bands do not cover the real line")
    return PointTable(meta.get("table", "?"), components)


@lru_cache(maxsize=None)
def load_table(name: str) -> PointTable:
    text = resources.files("icu_lstm").joinpath(f"tables/{name}.csv").read_text("utf-8")
    return parse_point_table(text)


@dataclass(frozen=True)
class ScoreBreakdown:
    components: dict
    total: int
    mortality_probability: Optional[float] = None
    not_assessed: tuple = ()
    no_data: tuple = field(default=())


def _observed(window: ChannelGrid, channel: VitalChannel):
    col = window.values[window.mask[:, channel], channel]
    p = CHANNEL_PROFILES[channel]
    bad = col[~np.isfinite(col) | (col < p.low) | (col > p.high)]
    if len(bad):
        raise ScoreInputError(f"{channel.label} value {bad[0]} outside plausible range "
                              f"[{p.low}, {p.high}] {p.unit}")
    return col


def _score(table: PointTable, window: ChannelGrid, extra: dict):
    components = {}
    no_data = []
    for name, (source, _) in table.components.items():
        if source in extra:
            values = [extra[source]]
        else:
            values = _observed(window, VitalChannel[source.upper()])
        if len(values) == 0:
            components[name] = 0
            no_data.append(name)
            continue
        # worst value in the window = the one earning the most points
        components[name] = max(table.points(name, float(v)) for v in values)
    return components, tuple(no_data)


def saps2_probability(total_points: float) -> float:
    logit = -7.7631 + 0.0737 * total_points + 0.9971 * math.log(total_points + 1.0)
    return 1.0 / (1.0 + math.exp(-logit))


def saps2_score(window: ChannelGrid, age_years: float) -> ScoreBreakdown:
    """Partial SAPS-II over age and the seven vital channels it shares with the grid.

    ``window`` must hold raw physical units. Components the grid cannot
    supply score 0 and are listed in ``not_assessed``.
    """
    if not AGE_RANGE[0] <= age_years <= AGE_RANGE[1]:
        raise ScoreInputError(f"age {age_years} outside plausible range {AGE_RANGE}")
    components, no_data = _score(load_table("saps2"), window, {"age_years": age_years})
    total = sum(components.values())
    return ScoreBreakdown(components, total, saps2_probability(total),
                          SAPS2_NOT_ASSESSED, no_data)


def sofa_score(window: ChannelGrid) -> ScoreBreakdown:
    """Cardiovascular (MAP), neurological (GCS) and hepatic (bilirubin) SOFA points."""
    components, no_data = _score(load_table("sofa"), window, {})
    return ScoreBreakdown(components, sum(components.values()), None,
                          SOFA_NOT_ASSESSED, no_data)


# ---------------------------------------------------------------------------
# Gaussian naive Bayes


@dataclass(frozen=True)
class NbModel:
    classes: np.ndarray
    priors: np.ndarray
    means: np.ndarray  # classes x features
    variances: np.ndarray


def nb_fit(X, y) -> NbModel:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError("naive Bayes needs at least two classes in the training set")
    if counts.min() < 2:
        raise ValueError("naive Bayes needs at least two samples per class")
    means = np.stack([X[y == k].mean(axis=0) for k in classes])
    variances = np.stack([np.maximum(X[y == k].var(axis=0), VAR_FLOOR) for k in classes])
    return NbModel(classes, counts / counts.sum(), means, variances)


def nb_log_joint(model: NbModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    ll = -0.5 * (np.log(2.0 * np.pi * model.variances)[None]
                 + (X[:, None, :] - model.means[None]) ** 2 / model.variances[None]).sum(axis=2)
    return ll + np.log(model.priors)[None]


def nb_predict(model: NbModel, X) -> np.ndarray:
    """Class posteriors, one row per sample (columns follow ``model.classes``)."""
    lj = nb_log_joint(model, X)
    lj -= lj.max(axis=1, keepdims=True)
    post = np.exp(lj)
    return post / post.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# logistic regression


class LrDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LrModel:
    weights: np.ndarray
    intercept: float
    loss_history: tuple = ()


def _lr_loss(X, y, w, b):
    z = X @ w + b
    # log(1 + exp(z)) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def lr_fit(X, y, lr: float = 0.1, iters: int = 2000) -> LrModel:
    """Full-batch gradient descent on mean binary cross-entropy from zero weights.

    Raises ``LrDiverged`` if the loss ever increases (beyond float noise).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) == 0:
        raise ValueError("empty training set")
    n, d = X.shape
    w = np.zeros(d)
    b = 0.0
    history = [_lr_loss(X, y, w, b)]
    for it in range(iters):
        err = _sigmoid(X @ w + b) - y
        w = w - lr * (X.T @ err) / n
        b = b - lr * float(err.mean())
        cur = _lr_loss(X, y, w, b)
        if not math.isfinite(cur) or cur > history[-1] + 1e-12 * (1.0 + history[-1]):
            raise LrDiverged(f"loss rose from {history[-1]:.6g} to {cur:.6g} at iteration "
                             f"{it + 1}; step size {lr} too large for these features")
        history.append(cur)
    return LrModel(w, b, tuple(history))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def lr_predict(model: LrModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return _sigmoid(X @ model.weights + model.intercept)


def flatten_windows(grids: Sequence[ChannelGrid]) -> np.ndarray:
    return np.stack([g.values.ravel() for g in grids]) if grids else np.zeros((0, 0))


# ---------------------------------------------------------------------------
# turning scores into decisions


def _f1_at(scores, labels, threshold):
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    return 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)


def score_to_classifier(scores, labels) -> float:
    """Pick the decision threshold (``score >= t`` is positive) with the best F1.

    Candidates are midpoints between adjacent distinct scores; ties go to
    the lower threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if len(scores) == 0:
        raise ValueError("no scores to calibrate on")
    distinct = np.unique(scores)
    if len(distinct) == 1:
        return float(distinct[0])
    best_t, best_f1 = None, -1.0
    for t in (distinct[:-1] + distinct[1:]) / 2.0:
        f1 = _f1_at(scores, labels, t)
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t

