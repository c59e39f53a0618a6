"""Evaluation metrics: OA/AA/Kappa, precision/recall/F1, ROC areas and IoU."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .errors import EvaluationError, ShapeError

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, cols = prediction
    class_ids: List[int]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion_matrix(pred: np.ndarray, truth: np.ndarray, ignore_label: Optional[int] = 0) -> ConfusionMatrix:
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    keep = np.ones_like(truth, dtype=bool) if ignore_label is None else truth != ignore_label
    pred, truth = pred[keep], truth[keep]
    if truth.size == 0:
        raise EvaluationError("no evaluable pixels")
    ids = sorted(set(np.unique(truth).tolist()) | set(np.unique(pred).tolist()))
    lookup = {c: i for i, c in enumerate(ids)}
    counts = np.zeros((len(ids), len(ids)), dtype=np.int64)
    np.add.at(counts, (np.vectorize(lookup.get)(truth), np.vectorize(lookup.get)(pred)), 1)
    return ConfusionMatrix(counts, ids)


def metrics_from_confusion(cm: ConfusionMatrix) -> Dict[str, object]:
    counts = np.asarray(cm.counts, dtype=np.float64)
    total = counts.sum()
    if total == 0:
        raise EvaluationError("empty confusion matrix")
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    oa = np.trace(counts) / total
    present = rows > 0
    per_class = {int(c): float(counts[i, i] / rows[i]) for i, c in enumerate(cm.class_ids) if present[i]}
    aa = float(np.mean(list(per_class.values())))
    pe = float((rows * cols).sum() / total**2)
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return {"OA": float(oa), "AA": aa, "Kappa": float(kappa), "per_class": per_class}


def classification_metrics(pred: np.ndarray, truth: np.ndarray, ignore_label: Optional[int] = 0) -> Dict[str, object]:
    """OA, AA (over classes present in truth), Cohen's kappa and per-class recall."""
    return metrics_from_confusion(confusion_matrix(pred, truth, ignore_label))


def _binary_counts(pred: np.ndarray, truth: np.ndarray):
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    tp = np.count_nonzero(pred & truth)
    fp = np.count_nonzero(pred & ~truth)
    fn = np.count_nonzero(~pred & truth)
    return tp, fp, fn


def binary_prf(pred: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    tp, fp, fn = _binary_counts(pred, truth)
    if tp + fn == 0:
        raise EvaluationError("truth has no positive pixels")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": float(precision), "recall": float(recall), "F1": float(f1)}


def binary_iou(pred: np.ndarray, truth: np.ndarray) -> float:
    tp, fp, fn = _binary_counts(pred, truth)
    union = tp + fp + fn
    return tp / union if union else 0.0


@dataclass
class RocCurve:
    thresholds: np.ndarray  # descending, +inf first
    pd: np.ndarray
    pf: np.ndarray


def roc_curve(scores: np.ndarray, truth: np.ndarray) -> RocCurve:
    s = np.asarray(scores, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=bool).ravel()
    if s.shape != t.shape:
        raise ShapeError(f"scores {s.shape} vs truth {t.shape}")
    pos, neg = np.count_nonzero(t), np.count_nonzero(~t)
    if pos == 0 or neg == 0:
        raise EvaluationError("ROC needs both positive and negative pixels")
    order = np.argsort(-s, kind="stable")
    s_sorted, t_sorted = s[order], t[order]
    # last index of each run of equal scores
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(t_sorted)[last]
    fp = (last + 1) - tp
    thresholds = np.r_[np.inf, s_sorted[last]]
    return RocCurve(thresholds, np.r_[0.0, tp / pos], np.r_[0.0, fp / neg])


def roc_aucs(scores: np.ndarray, truth: np.ndarray) -> Dict[str, float]:
    """Areas of the 3-D ROC: AUC(D,F), AUC(D,tau), AUC(F,tau) and the ODP combination.

    Thresholds are min-max normalised before the tau-axis areas; the ``+inf``
    sentinel maps to 1. Constant scores give AUC(D,F) = 0.5 and zero tau-areas.
    """
    curve = roc_curve(scores, truth)
    auc_df = float(_trapezoid(curve.pd, curve.pf))
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    if hi > lo:
        tau = np.clip((curve.thresholds - lo) / (hi - lo), 0.0, 1.0)
        auc_dtau = float(-_trapezoid(curve.pd, tau))
        auc_ftau = float(-_trapezoid(curve.pf, tau))
    else:
        auc_dtau = auc_ftau = 0.0
    return {
        "auc_df": auc_df,
        "auc_dtau": auc_dtau,
        "auc_ftau": auc_ftau,
        "auc_odp": auc_df + auc_dtau - auc_ftau,
    }
