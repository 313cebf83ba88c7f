"""Evaluation metrics: curve errors, MLS absolute error and ROC AUC."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .data_model import MidlineAnnotation


@dataclass(frozen=True)
class MeanStd:
    mean: float
    std: float

    @classmethod
    def of(cls, values) -> "MeanStd":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(v.std()))

    def as_dict(self):
        return {"mean": self.mean, "std": self.std}


@dataclass(frozen=True)
class CurveMetricsReport:
    MAX: MeanStd
    RMSE: MeanStd
    MAXs: MeanStd
    RMSEs: MeanStd
    n_studies: int
    n_slices: int

    def as_dict(self):
        return {k: getattr(self, k).as_dict() for k in ("MAX", "RMSE", "MAXs", "RMSEs")}


def _residuals(gt: MidlineAnnotation, pred_curve) -> np.ndarray:
    if gt.interval is None:
        raise ValueError("ground truth interval is empty")
    pred_curve = np.asarray(pred_curve, dtype=np.float64)
    y_lo, y_hi = gt.interval
    if pred_curve.shape[0] <= y_hi:
        raise ValueError(f"predicted curve has {pred_curve.shape[0]} rows, ground truth reaches row {y_hi}")
    return gt.xs - pred_curve[y_lo:y_hi + 1]


def curve_errors(gt: MidlineAnnotation, pred_curve) -> tuple[float, float]:
    """(rmse, max) of the prediction over the ground-truth rows only."""
    e = _residuals(gt, pred_curve)
    return float(np.sqrt(np.mean(e ** 2))), float(np.max(np.abs(e)))


def aggregate_curve_metrics(studies) -> CurveMetricsReport:
    """``studies`` is a list of studies, each a list of (gt annotation, predicted curve).

    Slices without a ground-truth midline are skipped. Per-study RMSE pools
    the squared errors of all annotated rows of the study.
    """
    slice_rmse, slice_max, study_rmse, study_max = [], [], [], []
    for study in studies:
        sq_sum, n_rows, maxes = 0.0, 0, []
        for gt, pred in study:
            if gt.interval is None:
                continue
            e = _residuals(gt, pred)
            slice_rmse.append(np.sqrt(np.mean(e ** 2)))
            maxes.append(np.max(np.abs(e)))
            sq_sum += float(np.sum(e ** 2))
            n_rows += e.size
        if n_rows:
            slice_max.extend(maxes)
            study_rmse.append(np.sqrt(sq_sum / n_rows))
            study_max.append(max(maxes))
    if not slice_rmse:
        raise ValueError("no annotated slices to evaluate")
    return CurveMetricsReport(
        MAX=MeanStd.of(study_max), RMSE=MeanStd.of(study_rmse),
        MAXs=MeanStd.of(slice_max), RMSEs=MeanStd.of(slice_rmse),
        n_studies=len(study_rmse), n_slices=len(slice_rmse),
    )


def mls_mae(pairs) -> MeanStd:
    """Mean ± population std of |gt - pred|; a missing prediction scores as 0 mm."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no (gt, pred) pairs")
    errors = [abs(float(gt) - (0.0 if pred is None else float(pred))) for gt, pred in pairs]
    return MeanStd.of(errors)


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ValueError("labels and scores differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC AUC needs both classes")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))
