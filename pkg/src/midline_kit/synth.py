"""Synthetic brain-slice phantoms with an analytic, Gaussian-bump midline."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .data_model import MidlineAnnotation, Study, StudyAnnotation

PX_MM = 0.5
MIN_ROW_WIDTH = 8  # annotated rows: brain mask at least this wide
BORDER_MARGIN = 3.0
AMP_RANGE = (6.0, 20.0)  # px, bump amplitudes of the "shifted" mixture component
NEAR_ZERO_AMP = 0.5  # px, upper end of the near-zero component
SIGNIFICANT_AMP = 10.0  # px, amplitude giving ~5 mm at 0.5 mm/px


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomParams:
    size: tuple[int, int] = (160, 160)
    center: tuple[float, float] = (80.0, 80.5)  # (cy, cx)
    semi_axes: tuple[float, float] = (64.0, 52.0)  # (ry, rx)
    x0: float = 80.5
    amplitude: float = 0.0
    y0: float = 80.0
    sigma: float = 12.0
    texture_contrast: float = 0.3
    noise: float = 0.08
    line_contrast: float = 0.8
    polarity: int = 1  # +1 bright midline, -1 dark
    seed: int = 0

    def curve(self, ys) -> np.ndarray:
        ys = np.asarray(ys, dtype=np.float64)
        return self.x0 + self.amplitude * np.exp(-((ys - self.y0) ** 2) / (2 * self.sigma ** 2))


def brain_mask(params: PhantomParams) -> np.ndarray:
    h, w = params.size
    (cy, cx), (ry, rx) = params.center, params.semi_axes
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _annotation(params: PhantomParams, mask: np.ndarray) -> MidlineAnnotation:
    widths = mask.sum(axis=1)
    rows = np.flatnonzero(widths >= MIN_ROW_WIDTH)
    w = params.size[1]
    if rows.size == 0:
        return MidlineAnnotation.empty(w)
    if rows[-1] - rows[0] + 1 != rows.size:
        raise PhantomError("annotated rows are not contiguous")
    xs = params.curve(rows)
    for y, x in zip(rows, xs):
        cols = np.flatnonzero(mask[y])
        if x < cols[0] + BORDER_MARGIN or x > cols[-1] - BORDER_MARGIN:
            raise PhantomError(f"midline at row {y} (x={x:.2f}) is within {BORDER_MARGIN} px of the brain border")
    return MidlineAnnotation((int(rows[0]), int(rows[-1])), xs, w)


def gen_slice(params: PhantomParams) -> tuple[np.ndarray, MidlineAnnotation]:
    if not params.sigma > 0:
        raise PhantomError("sigma must be positive")
    if params.amplitude < 0:
        raise PhantomError("amplitude must be non-negative")
    if params.polarity not in (1, -1):
        raise PhantomError("polarity must be +1 or -1")
    h, w = params.size
    rng = np.random.default_rng(params.seed)
    mask = brain_mask(params)
    ann = _annotation(params, mask)

    texture = ndimage.gaussian_filter(rng.standard_normal((h, w)), 3.0)
    texture /= texture.std() + 1e-12
    image = 1.0 + params.texture_contrast * texture + params.noise * rng.standard_normal((h, w))

    # anti-aliased line: triangular profile of half-width 1 px around the analytic x
    ys = np.arange(h, dtype=np.float64)
    xx = np.arange(w, dtype=np.float64)[None, :]
    line = np.clip(1.0 - np.abs(xx - params.curve(ys)[:, None]), 0.0, 1.0)
    image += params.polarity * params.line_contrast * line

    image = np.where(mask, np.maximum(image, 0.05), 0.0)
    return image.astype(np.float32), ann


def _draw_geometry(rng, size):
    h, w = size
    cy = h / 2 + rng.uniform(-0.04, 0.04) * h
    cx = np.floor(w / 2 + rng.uniform(-0.04, 0.04) * w) + 0.5
    ry = min(rng.uniform(0.36, 0.45) * h, cy - 4, h - 5 - cy)
    rx = min(rng.uniform(0.29, 0.375) * w, cx - 4, w - 5 - cx)
    return (cy, cx), (ry, rx)


def _draw_amplitude(rng, shift_distribution):
    if callable(shift_distribution):
        return float(shift_distribution(rng))
    positive_frac = float(shift_distribution)
    lo, hi = AMP_RANGE
    weight = min(1.0, positive_frac * (hi - lo) / (hi - SIGNIFICANT_AMP))
    if rng.random() < weight:
        return rng.uniform(lo, hi)
    return rng.uniform(0.0, NEAR_ZERO_AMP)


def gen_study(rng, slices_per_study: int, shift_distribution=0.5, size=(160, 160),
              empty_prob: float = 0.1, study_id: str = "phantom"):
    """One study: shared head geometry and deformation, varying per slice.

    The peak slice carries the full bump amplitude; the others shrink and
    flatten with distance from it, and may be tissue caps with no midline.
    """
    h, w = size
    for _ in range(100):
        (cy, cx), (ry, rx) = _draw_geometry(rng, size)
        amp = _draw_amplitude(rng, shift_distribution)
        base = PhantomParams(
            size=(h, w), center=(cy, cx), semi_axes=(ry, rx),
            x0=cx + rng.uniform(-0.3, 0.3), amplitude=amp,
            y0=cy + rng.uniform(-0.15, 0.15) * ry, sigma=rng.uniform(0.12, 0.25) * ry,
            texture_contrast=rng.uniform(0.2, 0.4), noise=rng.uniform(0.03, 0.1),
            line_contrast=rng.uniform(0.5, 1.0), polarity=int(rng.choice([-1, 1])),
        )
        peak = int(rng.integers(slices_per_study))
        images, anns = [], []
        try:
            for k in range(slices_per_study):
                d = abs(k - peak) / max(1, slices_per_study - 1)
                seed = int(rng.integers(2 ** 63))
                if k != peak and rng.random() < empty_prob:
                    # small cap of tissue with no row wide enough for a midline
                    p = replace(base, semi_axes=(rng.uniform(6, 12), rng.uniform(2.0, 3.3)), amplitude=0.0, seed=seed)
                else:
                    shrink = 1.0 - 0.12 * d
                    p = replace(base, semi_axes=(ry * shrink, rx * shrink), amplitude=amp * (1.0 - 0.4 * d), seed=seed)
                img, ann = gen_slice(p)
                images.append(img)
                anns.append(ann)
        except PhantomError:
            continue
        study = Study(study_id, np.stack(images), (5.0, PX_MM, PX_MM))
        return study, StudyAnnotation(tuple(anns), px_mm=PX_MM)
    raise PhantomError("could not draw a valid phantom study in 100 attempts")


def gen_dataset(n_studies: int, slices_per_study: int = 4, shift_distribution=0.5, seed: int = 0,
                size=(160, 160), empty_prob: float = 0.1):
    """``n_studies`` phantom studies, each from its own child seed of ``seed``.

    ``shift_distribution`` is either the target fraction of studies with a
    significant shift, or a callable drawing a bump amplitude (px) from a
    numpy Generator.
    """
    if n_studies < 1 or slices_per_study < 1:
        raise ValueError("need at least one study and one slice per study")
    if not callable(shift_distribution) and not 0 <= shift_distribution <= 1:
        raise ValueError("positive fraction must lie in [0, 1]")
    children = np.random.SeedSequence(seed).spawn(n_studies)
    return [
        gen_study(np.random.default_rng(child), slices_per_study, shift_distribution, size, empty_prob,
                  study_id=f"phantom-s{seed}-{i:04d}")
        for i, child in enumerate(children)
    ]
