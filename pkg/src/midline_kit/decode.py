"""Decoding of network outputs into curves, confidence bands and limits."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mls import MIN_INTERVAL_SPAN

ROW_SUM_TOL = 1e-4
QUANTILE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class ConfidenceBand:
    lower: np.ndarray
    upper: np.ndarray
    coverage: float


def _check_rows(prob):
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2:
        raise ValueError(f"expected an H x W array, got shape {prob.shape}")
    sums = prob.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1) > ROW_SUM_TOL)
    if bad.size:
        raise ValueError(f"row {bad[0]} sums to {sums[bad[0]]}, not 1")
    return prob


def expected_midline(prob) -> np.ndarray:
    """Per-row expectation of x under the row distribution."""
    prob = _check_rows(prob)
    xs = np.arange(prob.shape[1], dtype=np.float64)
    return np.clip(prob @ xs, 0, prob.shape[1] - 1)


def _quantile(cdf, q):
    # smallest x with CDF(x) >= q
    idx = (cdf < q - QUANTILE_EPS).sum(axis=1)
    return np.minimum(idx, cdf.shape[1] - 1).astype(np.float64)


def confidence_band(prob, coverage: float = 0.95) -> ConfidenceBand:
    if not 0 < coverage < 1:
        raise ValueError("coverage must lie in (0, 1)")
    prob = _check_rows(prob)
    cdf = np.cumsum(prob, axis=1)
    lower = _quantile(cdf, (1 - coverage) / 2)
    upper = _quantile(cdf, (1 + coverage) / 2)
    return ConfidenceBand(lower, upper, coverage)


def limits_interval(limits_prob, threshold: float = 0.5) -> tuple[int, int] | None:
    """1D convex hull of the rows whose probability strictly exceeds ``threshold``."""
    if not 0 <= threshold < 1:
        raise ValueError("threshold must lie in [0, 1)")
    rows = np.flatnonzero(np.asarray(limits_prob) > threshold)
    if rows.size == 0:
        return None
    return int(rows[0]), int(rows[-1])


def usable_interval(interval):
    """Drop intervals too short for a normal midline (y_hi - y_lo < 2)."""
    if interval is None or interval[1] - interval[0] < MIN_INTERVAL_SPAN:
        return None
    return interval
