"""Midline shift geometry: the chord through the curve endpoints, per-slice
shift, study-level shift and the significant-shift rule."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGNIFICANT_MM = 5.0
MIN_INTERVAL_SPAN = 2  # y_hi - y_lo must be at least this for a chord plus a deviating row


class UndefinedMLS(ValueError):
    """Raised when a slice has no interval long enough to define a shift."""


@dataclass(frozen=True)
class SliceMls:
    value_mm: float
    argmax_row: int
    chord: tuple[float, float]  # x = a + b * y


def _check_interval(interval):
    if interval is None:
        raise UndefinedMLS("empty interval")
    y_lo, y_hi = int(interval[0]), int(interval[1])
    if y_hi - y_lo < MIN_INTERVAL_SPAN:
        raise UndefinedMLS(f"interval [{y_lo}, {y_hi}] is too short to define a normal midline")
    return y_lo, y_hi


def normal_midline(curve, interval) -> tuple[float, float]:
    """Straight line x = a + b*y through the curve at both interval endpoints.

    ``curve`` is indexed by absolute row, so ``curve[y_lo]`` is the x at row y_lo.
    """
    y_lo, y_hi = _check_interval(interval)
    curve = np.asarray(curve, dtype=np.float64)
    b = (curve[y_hi] - curve[y_lo]) / (y_hi - y_lo)
    a = curve[y_lo] - b * y_lo
    return float(a), float(b)


def slice_mls(curve, interval, px_mm: float) -> SliceMls:
    if not px_mm > 0:
        raise ValueError("px_mm must be positive")
    y_lo, y_hi = _check_interval(interval)
    curve = np.asarray(curve, dtype=np.float64)
    a, b = normal_midline(curve, (y_lo, y_hi))
    ys = np.arange(y_lo, y_hi + 1)
    dev = np.abs(curve[y_lo:y_hi + 1] - (a + b * ys))
    k = int(np.argmax(dev))  # first occurrence -> smallest row on ties
    return SliceMls(float(px_mm * dev[k]), int(y_lo + k), (a, b))


def try_slice_mls(curve, interval, px_mm: float) -> SliceMls | None:
    try:
        return slice_mls(curve, interval, px_mm)
    except UndefinedMLS:
        return None


def study_mls(per_slice) -> tuple[float, int] | None:
    """Max over defined per-slice values (floats or SliceMls; None = undefined).

    Returns ``(value_mm, slice_index)`` or None when no slice has a midline.
    """
    best = None
    for i, s in enumerate(per_slice):
        if s is None:
            continue
        v = s.value_mm if isinstance(s, SliceMls) else float(s)
        if best is None or v > best[0]:
            best = (v, i)
    return best


def classify_significant(value_mm: float, threshold_mm: float = SIGNIFICANT_MM) -> bool:
    if threshold_mm < 0:
        raise ValueError("threshold_mm must be non-negative")
    if value_mm < 0:
        raise ValueError("value_mm must be non-negative")
    return bool(value_mm >= threshold_mm)
