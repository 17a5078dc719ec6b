"""Inference, eye-level ensembling and the metric suite.

All aggregates are macro means over classes. Metrics that are undefined for
a class (no positives, or no negatives for AUC) are left out of the
aggregate and reported in ``EvalReport.flags``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .data import OCT, DatasetManifest, ImageRecord
from .errors import ConfigError, DataError, ShapeError, UndefinedMetricError
from .model import ModelParams, forward
from .numeric import sigmoid

REPORT_SCHEMA = "fddm-eval-report/1"
THRESHOLD = 0.5
MAJORITY_FRACTION = 0.10
TABLE_COLUMNS = ("MAP", "Sensitivity", "Specificity", "F1", "AUC")


def predict_images(params: ModelParams, manifest: DatasetManifest, modality: str = OCT):
    """Sigmoid probabilities for every image of ``modality``.

    Returns ``(probs, records)`` with ``probs`` of shape (N, C).
    """
    if manifest.num_classes != params.config.num_classes:
        raise ConfigError(
            f"manifest has {manifest.num_classes} classes, model has {params.config.num_classes}"
        )
    X, _, recs = manifest.subset(modality)
    if not recs:
        raise DataError(f"no {modality} records to predict")
    if X.shape[1] != params.config.input_dim:
        raise ConfigError(f"features have {X.shape[1]} dims, model expects {params.config.input_dim}")
    _, Z, _ = forward(params, X)
    return sigmoid(Z), recs


@dataclass
class EyePrediction:
    eye_id: str
    scores: np.ndarray
    decisions: np.ndarray
    truth: np.ndarray | None


def ensemble_eye(
    groups: Mapping[str, Any],
    truth: Mapping[str, Any] | None = None,
    threshold: float = THRESHOLD,
) -> list[EyePrediction]:
    """Any-positive rule: an eye's class score is the max over its images.

    ``groups`` maps eye id to a (k, C) array of image probabilities.
    """
    out = []
    for eye_id in sorted(groups):
        probs = np.atleast_2d(np.asarray(groups[eye_id], dtype=np.float64))
        if probs.shape[0] == 0 or probs.size == 0:
            raise DataError(f"eye {eye_id!r} has no images")
        scores = probs.max(axis=0)
        t = None if truth is None else np.asarray(truth[eye_id], dtype=np.int64)
        out.append(EyePrediction(eye_id, scores, (scores >= threshold).astype(np.int64), t))
    return out


def eye_predictions(probs: np.ndarray, records: Sequence[ImageRecord]) -> list[EyePrediction]:
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.eye_id, []).append(i)
    truth = {r.eye_id: r.labels for r in records}
    return ensemble_eye({e: probs[idx] for e, idx in groups.items()}, truth)


def _check_pair(scores, truth) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth).ravel().astype(np.int64)
    if s.shape != t.shape:
        raise ShapeError(f"scores {s.shape} vs truth {t.shape}")
    return s, t


def average_precision(scores, truth) -> float:
    """Non-interpolated AP: mean precision at each positive in score order.

    Ties keep their original order (stable sort).
    """
    s, t = _check_pair(scores, truth)
    n_pos = int(t.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    hits = t[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(hits) + 1)
    return float(np.sum((cum / ranks)[hits == 1]) / n_pos)


def roc_auc(scores, truth) -> float:
    """Mann-Whitney AUC, ``P(s_pos > s_neg) + 0.5 * P(s_pos == s_neg)``."""
    s, t = _check_pair(scores, truth)
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    # Average ranks handle ties as half-wins.
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(s.size, dtype=np.float64)
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[t == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class ThresholdMetrics:
    sensitivity: np.ndarray
    specificity: np.ndarray
    f1: np.ndarray
    flags: list[str] = field(default_factory=list)


def threshold_metrics(decisions, truth, class_names: Sequence[str] | None = None) -> ThresholdMetrics:
    """Per-class sensitivity, specificity and F1 from (N, C) binary arrays.

    A zero denominator yields 0 and a flag.
    """
    d = np.atleast_2d(np.asarray(decisions)).astype(np.int64)
    t = np.atleast_2d(np.asarray(truth)).astype(np.int64)
    if d.shape != t.shape:
        raise ShapeError(f"decisions {d.shape} vs truth {t.shape}")
    tp = ((d == 1) & (t == 1)).sum(axis=0)
    fp = ((d == 1) & (t == 0)).sum(axis=0)
    fn = ((d == 0) & (t == 1)).sum(axis=0)
    tn = ((d == 0) & (t == 0)).sum(axis=0)
    names = class_names or [str(c) for c in range(d.shape[1])]
    flags: list[str] = []

    def ratio(num, den, label):
        out = np.zeros(num.shape, dtype=np.float64)
        for c in range(num.size):
            if den[c] > 0:
                out[c] = num[c] / den[c]
            else:
                flags.append(f"{label} undefined for class {names[c]} (zero denominator)")
        return out

    return ThresholdMetrics(
        ratio(tp, tp + fn, "sensitivity"),
        ratio(tn, tn + fp, "specificity"),
        ratio(2 * tp, 2 * tp + fp + fn, "f1"),
        flags,
    )


def majority_minority_split(manifest: DatasetManifest, modality: str | None = OCT) -> tuple[list[int], list[int]]:
    """Classes with strictly more than 10% positive images are majority."""
    recs = [r for r in manifest.records if modality is None or r.modality == modality]
    if not recs:
        raise DataError("cannot split classes of an empty manifest")
    counts = manifest.class_counts(modality)
    frac = counts / len(recs)
    majority = [c for c in range(manifest.num_classes) if frac[c] > MAJORITY_FRACTION]
    minority = [c for c in range(manifest.num_classes) if not frac[c] > MAJORITY_FRACTION]
    return majority, minority


def _mean_defined(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    class_names: list[str]
    ap: list[float | None]
    auc: list[float | None]
    sensitivity: list[float]
    specificity: list[float]
    f1: list[float]
    majority: list[int]
    minority: list[int]
    class_frequency: list[float]
    num_eyes: int
    flags: list[str] = field(default_factory=list)

    @property
    def map(self) -> float | None:
        return _mean_defined(self.ap)

    @property
    def mean_auc(self) -> float | None:
        return _mean_defined(self.auc)

    @property
    def mean_sensitivity(self) -> float:
        return float(np.mean(self.sensitivity))

    @property
    def mean_specificity(self) -> float:
        return float(np.mean(self.specificity))

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.f1))

    @property
    def majority_map(self) -> float | None:
        return _mean_defined([self.ap[c] for c in self.majority])

    @property
    def minority_map(self) -> float | None:
        return _mean_defined([self.ap[c] for c in self.minority])

    def aggregates(self) -> dict[str, float | None]:
        return {
            "MAP": self.map,
            "Sensitivity": self.mean_sensitivity,
            "Specificity": self.mean_specificity,
            "F1": self.mean_f1,
            "AUC": self.mean_auc,
            "MAP_majority": self.majority_map,
            "MAP_minority": self.minority_map,
        }

    def to_dict(self) -> dict[str, Any]:
        per_class = []
        for c, name in enumerate(self.class_names):
            per_class.append({
                "class": name,
                "group": "majority" if c in self.majority else "minority",
                "image_frequency": self.class_frequency[c],
                "AP": self.ap[c],
                "Sensitivity": self.sensitivity[c],
                "Specificity": self.specificity[c],
                "F1": self.f1[c],
                "AUC": self.auc[c],
            })
        return {
            "schema": REPORT_SCHEMA,
            "num_eyes": self.num_eyes,
            "aggregates": self.aggregates(),
            "per_class": per_class,
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", *TABLE_COLUMNS])
        fmt = lambda v: "" if v is None else repr(float(v))
        agg = self.aggregates()
        w.writerow(["overall", *(fmt(agg[k]) for k in TABLE_COLUMNS)])
        for c, name in enumerate(self.class_names):
            w.writerow([name, fmt(self.ap[c]), fmt(self.sensitivity[c]), fmt(self.specificity[c]),
                        fmt(self.f1[c]), fmt(self.auc[c])])
        return buf.getvalue()

    def save(self, stem) -> tuple[str, str]:
        """Write ``<stem>.json`` and ``<stem>.csv``; returns both paths."""
        jp, cp = f"{stem}.json", f"{stem}.csv"
        with open(jp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())
        with open(cp, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_csv())
        return jp, cp


def make_report(
    predictions: Sequence[EyePrediction],
    manifest: DatasetManifest,
    modality: str = OCT,
) -> EvalReport:
    """Eye-level metrics for ``predictions`` over the eyes of ``manifest``."""
    if not predictions:
        raise DataError("no eye predictions")
    eyes = {r.eye_id for r in manifest.records if r.modality == modality}
    covered = {p.eye_id for p in predictions}
    missing = eyes - covered
    if missing:
        raise DataError(f"{len(missing)} test eyes have no prediction (e.g. {sorted(missing)[0]!r})")
    if any(p.truth is None for p in predictions):
        raise DataError("eye predictions must carry ground truth")
    names = list(manifest.class_names)
    S = np.stack([p.scores for p in predictions])
    D = np.stack([p.decisions for p in predictions])
    T = np.stack([p.truth for p in predictions])
    flags: list[str] = []
    ap: list[float | None] = []
    auc: list[float | None] = []
    for c, name in enumerate(names):
        try:
            ap.append(average_precision(S[:, c], T[:, c]))
        except UndefinedMetricError:
            ap.append(None)
            flags.append(f"AP undefined for class {name}: no positive eyes")
        try:
            auc.append(roc_auc(S[:, c], T[:, c]))
        except UndefinedMetricError:
            auc.append(None)
            flags.append(f"AUC undefined for class {name}: single-class truth")
    tm = threshold_metrics(D, T, names)
    flags.extend(tm.flags)
    majority, minority = majority_minority_split(manifest, modality)
    n_images = sum(1 for r in manifest.records if r.modality == modality)
    freq = (manifest.class_counts(modality) / n_images).tolist()
    return EvalReport(
        class_names=names,
        ap=ap,
        auc=auc,
        sensitivity=tm.sensitivity.tolist(),
        specificity=tm.specificity.tolist(),
        f1=tm.f1.tolist(),
        majority=majority,
        minority=minority,
        class_frequency=[float(f) for f in freq],
        num_eyes=len(predictions),
        flags=flags,
    )


def evaluate(params: ModelParams, manifest: DatasetManifest, modality: str = OCT) -> EvalReport:
    """Image inference, eye ensembling and the report in one call."""
    probs, recs = predict_images(params, manifest, modality)
    return make_report(eye_predictions(probs, recs), manifest, modality)
