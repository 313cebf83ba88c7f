"""End-to-end glue: study -> preprocessed slices -> network -> StudyPrediction,
and prediction/ground-truth pairing for evaluation."""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from . import decode, metrics, mls, network
from .data_model import (
    ANNOTATION_NAME, META_NAME, MidlineAnnotation, SlicePrediction, Study, StudyAnnotation,
    StudyPrediction, load_annotations, load_study,
)
from .preprocess import TARGET_MM, preprocess_slice, resample_annotation

log = logging.getLogger(__name__)


def fit_to_size(image: np.ndarray, size) -> np.ndarray:
    """Zero-pad (bottom/right) an image up to ``size``; larger images are rejected."""
    h, w = image.shape
    H, W = size
    if h > H or w > W:
        raise ValueError(f"slice of {h}x{w} px (after resampling) exceeds model input {H}x{W}")
    if (h, w) == (H, W):
        return image
    out = np.zeros((H, W), dtype=image.dtype)
    out[:h, :w] = image
    return out


def training_samples(study: Study, annotation: StudyAnnotation):
    """(preprocessed image, annotation on the 0.5 mm grid) per slice."""
    samples = []
    for img, ann in zip(study.volume, annotation.slices):
        pre = preprocess_slice(img, study.spacing_mm[1:])
        samples.append((pre.image, resample_annotation(ann, pre.transform, pre.image.shape[0])))
    return samples


def pad_samples(samples, size):
    return [(fit_to_size(img, size), ann) for img, ann in samples]


def decode_slice(prob, limits_prob, coverage=0.95, limits_threshold=0.5, px_mm=TARGET_MM) -> SlicePrediction:
    curve = decode.expected_midline(prob)
    band = decode.confidence_band(prob, coverage)
    interval = decode.limits_interval(limits_prob, limits_threshold)
    usable = decode.usable_interval(interval)
    value = row = None
    if usable is not None:
        s = mls.slice_mls(curve, usable, px_mm)
        value, row = s.value_mm, s.argmax_row
    return SlicePrediction(curve, band.lower, band.upper, interval, value, row)


def predict_study(model, study: Study, coverage: float = 0.95, limits_threshold: float = 0.5,
                  threshold_mm: float = mls.SIGNIFICANT_MM) -> StudyPrediction:
    size = model.config.input_size
    slices = []
    model.eval()
    for img in study.volume:
        pre = preprocess_slice(img, study.spacing_mm[1:])
        h, w = pre.image.shape
        x = torch.from_numpy(fit_to_size(pre.image, size)[None, None])
        with torch.no_grad():
            logits, limits_logits = model(x.to(next(model.parameters()).dtype))
        # crop padding before the row softmax so each row is a distribution over the real columns
        prob = network.row_softmax(logits[0, :h, :w].double()).numpy()
        limits_prob = torch.sigmoid(limits_logits[0, :h].double()).numpy()
        slices.append(decode_slice(prob, limits_prob, coverage, limits_threshold))
    return StudyPrediction(
        study.id, tuple(slices), grid_spacing_mm=(TARGET_MM, TARGET_MM),
        source_spacing_mm=study.spacing_mm[1:], coverage=coverage,
        limits_threshold=limits_threshold, threshold_mm=threshold_mm,
    )


def find_studies(root) -> list[Path]:
    """Study directories under ``root`` (itself, or its immediate subdirectories)."""
    root = Path(root)
    if (root / META_NAME).is_file():
        return [root]
    return sorted(p for p in root.iterdir() if (p / META_NAME).is_file())


def load_labelled(root):
    """[(Study, StudyAnnotation)] for every annotated study directory under ``root``."""
    out = []
    for d in find_studies(root):
        if not (d / ANNOTATION_NAME).is_file():
            log.warning("skipping %s: no %s", d, ANNOTATION_NAME)
            continue
        study = load_study(d)
        out.append((study, load_annotations(d, study)))
    return out


def evaluate(pairs, mls_threshold_mm: float = mls.SIGNIFICANT_MM) -> dict:
    """Metrics report for [(Study, StudyAnnotation, StudyPrediction)]."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no studies to evaluate")
    mae_pairs, labels, scores, curve_studies = [], [], [], []
    for study, ann, pred in pairs:
        if len(pred.slices) != len(ann.slices):
            raise ValueError(f"study {study.id}: {len(pred.slices)} predicted slices vs {len(ann.slices)} annotated")
        if ann.gt_mls_mm is not None:
            mae_pairs.append((ann.gt_mls_mm, pred.mls_mm))
            labels.append(ann.gt_mls_mm >= mls_threshold_mm)
            scores.append(0.0 if pred.mls_mm is None else pred.mls_mm)
        scale_y = study.spacing_mm[1] / pred.grid_spacing_mm[0]
        scale_x = study.spacing_mm[2] / pred.grid_spacing_mm[1]
        from .preprocess import Transform

        t = Transform(scale_y, scale_x)
        per_slice = []
        for a, p in zip(ann.slices, pred.slices):
            g = resample_annotation(a, t, len(p.curve))
            if g.interval is not None:
                per_slice.append((g, p.curve))
        curve_studies.append(per_slice)
    report = {
        "mae_mm": metrics.mls_mae(mae_pairs).as_dict() if mae_pairs else None,
        "roc_auc": metrics.roc_auc(labels, scores) if mae_pairs and 0 < sum(labels) < len(labels) else None,
    }
    curve = metrics.aggregate_curve_metrics(curve_studies)
    report["curve"] = curve.as_dict()
    report["n_studies"] = len(pairs)
    report["n_slices"] = curve.n_slices
    return report
