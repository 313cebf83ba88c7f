"""Slice preprocessing: isotropic resampling, Otsu background removal,
foreground z-scoring and horizontal flips."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data_model import MidlineAnnotation

log = logging.getLogger(__name__)

TARGET_MM = 0.5
OTSU_BINS = 256


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class Transform:
    """Axis-aligned scaling from original pixel coordinates to the resampled grid."""

    scale_y: float
    scale_x: float

    def apply(self, x, y):
        return np.asarray(x) * self.scale_x, np.asarray(y) * self.scale_y

    def inverse(self) -> "Transform":
        return Transform(1.0 / self.scale_y, 1.0 / self.scale_x)

    def matrix(self) -> np.ndarray:
        """3x3 homogeneous matrix acting on (x, y, 1)."""
        return np.diag([self.scale_x, self.scale_y, 1.0])


@dataclass(frozen=True, eq=False)
class PreprocessedSlice:
    image: np.ndarray
    foreground: np.ndarray
    transform: Transform


def resample_to_iso(image, spacing, target_mm: float = TARGET_MM):
    """Bilinear resampling of a 2D slice with row/column spacing ``spacing`` (mm)
    onto a ``target_mm`` grid.

    Output pixel (i', j') samples the input at (i' * target/sy, j' * target/sx);
    samples past the last row/column clamp to the edge.
    """
    sy, sx = (float(s) for s in spacing)
    if not (sy > 0 and sx > 0):
        raise ValueError(f"spacing must be positive, got {spacing}")
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape
    transform = Transform(sy / target_mm, sx / target_mm)
    out_h, out_w = max(1, round(h * sy / target_mm)), max(1, round(w * sx / target_mm))
    if (out_h, out_w) == (h, w) and transform.scale_y == 1 and transform.scale_x == 1:
        return image.copy(), transform
    rows = np.arange(out_h) / transform.scale_y
    cols = np.arange(out_w) / transform.scale_x
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    out = ndimage.map_coordinates(image, [rr, cc], order=1, mode="nearest")
    return out, transform


def resample_annotation(ann: MidlineAnnotation, transform: Transform, out_height: int) -> MidlineAnnotation:
    """Carry a per-row annotation onto the resampled grid by linear interpolation along y."""
    if ann.interval is None:
        return MidlineAnnotation.empty()
    if transform.scale_y == 1 and transform.scale_x == 1:
        return ann
    y_lo, y_hi = ann.interval
    new_lo = int(np.ceil(y_lo * transform.scale_y - 1e-9))
    new_hi = min(int(np.floor(y_hi * transform.scale_y + 1e-9)), out_height - 1)
    if new_hi < new_lo:
        return MidlineAnnotation.empty()
    ys = np.arange(new_lo, new_hi + 1) / transform.scale_y
    xs = np.interp(ys, ann.rows, ann.xs) * transform.scale_x
    return MidlineAnnotation((new_lo, new_hi), xs)


def otsu_foreground(image):
    """Otsu threshold over a 256-bin histogram spanning [min, max].

    Candidate thresholds are the interior bin edges; a pixel equal to an edge
    belongs to the lower class, so ``mask = image > threshold`` reproduces the
    partition exactly. Class means use the exact pixel values in each bin.
    Ties go to the lowest edge. A constant image gives threshold = min and a
    full mask.
    """
    image = np.asarray(image, dtype=np.float64)
    lo, hi = float(image.min()), float(image.max())
    if not hi > lo:
        return lo, np.ones(image.shape, dtype=bool)
    edges = lo + (hi - lo) * np.arange(OTSU_BINS + 1) / OTSU_BINS
    flat = image.ravel()
    bins = np.searchsorted(edges[1:-1], flat, side="left")
    counts = np.bincount(bins, minlength=OTSU_BINS).astype(np.float64)
    sums = np.bincount(bins, weights=flat, minlength=OTSU_BINS)

    n0 = np.cumsum(counts)[:-1]  # class 0 = bins < k, for k = 1..255
    s0 = np.cumsum(sums)[:-1]
    n, s = counts.sum(), sums.sum()
    n1, s1 = n - n0, s - s0
    with np.errstate(invalid="ignore", divide="ignore"):
        between = n0 * n1 * (s0 / n0 - s1 / n1) ** 2
    between = np.where((n0 > 0) & (n1 > 0), between, -np.inf)
    k = int(np.argmax(between)) + 1
    threshold = float(edges[k])
    return threshold, image > threshold


def normalize_intensity(image, mask):
    """Z-score the masked pixels; everything outside the mask becomes 0."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    values = image[mask]
    if values.size < 2:
        raise DegenerateInputError(f"normalization mask has {values.size} pixel(s)")
    mean = values.mean()
    std = values.std()
    if not std > 1e-12 * max(1.0, abs(mean)):
        raise DegenerateInputError("masked intensities have zero variance")
    out = np.zeros_like(image)
    out[mask] = (values - mean) / std
    return out


def hflip(image, annotation: MidlineAnnotation | None = None):
    image = np.asarray(image)
    flipped = image[..., ::-1].copy()
    if annotation is None:
        return flipped, None
    w = image.shape[-1]
    if annotation.interval is None:
        return flipped, annotation
    return flipped, MidlineAnnotation(annotation.interval, (w - 1) - annotation.xs, annotation.width)


def preprocess_slice(image, spacing) -> PreprocessedSlice:
    """Resample, remove background and normalize one slice.

    Slices whose foreground cannot be normalized (blank or constant) come back
    as all-zero images with an empty foreground.
    """
    resampled, transform = resample_to_iso(image, spacing)
    _, mask = otsu_foreground(resampled)
    try:
        normed = normalize_intensity(resampled, mask)
    except DegenerateInputError as exc:
        log.debug("degenerate slice, zeroing: %s", exc)
        normed = np.zeros_like(resampled)
        mask = np.zeros(resampled.shape, dtype=bool)
    return PreprocessedSlice(normed.astype(np.float32), mask, transform)
