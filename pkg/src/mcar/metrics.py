"""Multi-label evaluation: per-class AP, mAP and the precision/recall/F1 family."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean of precision@k over the ranks of the positives.

    Ranking is by descending score; equal scores keep their original order.
    Raises ``ValueError`` when there is no positive label.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order] > 0
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def mean_average_precision(scores: np.ndarray, labels: np.ndarray):
    """``(mAP, per-class AP with NaN for absent classes, absent class ids)``."""
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    C = scores.shape[1]
    ap = np.full(C, np.nan)
    absent = []
    for c in range(C):
        if labels[:, c].sum() == 0:
            absent.append(c)
            continue
        ap[c] = average_precision(scores[:, c], labels[:, c])
    present = ap[~np.isnan(ap)]
    m = float(present.mean()) if present.size else float("nan")
    return m, ap, absent


def assign_labels(scores: np.ndarray, threshold: float = 0.6, mode: str = "threshold") -> np.ndarray:
    """Binary predictions: ``score > threshold``, or the 3 best classes per image."""
    scores = np.asarray(scores)
    if mode == "threshold":
        return (scores > threshold).astype(np.int64)
    if mode == "top3":
        n, C = scores.shape
        idx = np.argsort(-scores, axis=1, kind="stable")[:, : min(3, C)]
        pred = np.zeros((n, C), dtype=np.int64)
        np.put_along_axis(pred, idx, 1, axis=1)
        return pred
    raise ValueError(f"unknown assignment mode {mode!r}")


@dataclass
class ConfusionCounts:
    correct: np.ndarray  # M_c per class
    predicted: np.ndarray  # M_p
    truth: np.ndarray  # M_g

    @classmethod
    def from_predictions(cls, pred: np.ndarray, labels: np.ndarray) -> "ConfusionCounts":
        pred = np.asarray(pred) > 0
        labels = np.asarray(labels) > 0
        return cls((pred & labels).sum(0), pred.sum(0), labels.sum(0))


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def prf_from_counts(counts: ConfusionCounts) -> Dict[str, float]:
    """OP, OR, OF1, CP, CR, CF1. Per-class terms with a zero denominator count as 0."""
    mc = counts.correct.astype(np.float64)
    mp = counts.predicted.astype(np.float64)
    mg = counts.truth.astype(np.float64)
    op = mc.sum() / mp.sum() if mp.sum() > 0 else 0.0
    or_ = mc.sum() / mg.sum() if mg.sum() > 0 else 0.0
    cp = float(np.mean(np.divide(mc, mp, out=np.zeros_like(mc), where=mp > 0)))
    cr = float(np.mean(np.divide(mc, mg, out=np.zeros_like(mc), where=mg > 0)))
    return {
        "OP": float(op), "OR": float(or_), "OF1": _f1(op, or_),
        "CP": cp, "CR": cr, "CF1": _f1(cp, cr),
    }


def prf_report(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.6, mode: str = "threshold") -> Dict[str, float]:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} disagree")
    pred = assign_labels(scores, threshold, mode)
    return prf_from_counts(ConfusionCounts.from_predictions(pred, labels))


@dataclass
class MetricReport:
    ap: np.ndarray
    map: float
    absent: List[int]
    all: Dict[str, float]
    top3: Dict[str, float]
    threshold: float = 0.6
    class_names: Optional[List[str]] = None
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        names = self.class_names or [str(i) for i in range(len(self.ap))]
        return {
            "mAP": self.map,
            "threshold": self.threshold,
            "all": self.all,
            "top3": self.top3,
            "ap": {n: (None if np.isnan(v) else float(v)) for n, v in zip(names, self.ap)},
            "absent_classes": [names[i] for i in self.absent],
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(scores: np.ndarray, labels: np.ndarray, threshold: float = 0.6, class_names=None) -> MetricReport:
    m, ap, absent = mean_average_precision(scores, labels)
    return MetricReport(
        ap=ap,
        map=m,
        absent=absent,
        all=prf_report(scores, labels, threshold, "threshold"),
        top3=prf_report(scores, labels, threshold, "top3"),
        threshold=threshold,
        class_names=class_names,
    )
