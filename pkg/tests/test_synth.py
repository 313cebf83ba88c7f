import hashlib
import math

import numpy as np
import pytest

from midline_kit import mls
from midline_kit.data_model import MidlineAnnotation
from midline_kit.preprocess import hflip
from midline_kit.synth import PhantomError, PhantomParams, brain_mask, gen_dataset, gen_slice


def brute_force_mls_mm(params, y_lo, y_hi, px_mm=0.5):
    def x(y):
        return params.x0 + params.amplitude * math.exp(-((y - params.y0) ** 2) / (2 * params.sigma ** 2))

    slope = (x(y_hi) - x(y_lo)) / (y_hi - y_lo)
    return px_mm * max(abs(x(y) - (x(y_lo) + slope * (y - y_lo))) for y in range(y_lo, y_hi + 1))


def test_straight_midline():
    _, ann = gen_slice(PhantomParams(amplitude=0.0))
    assert ann.slice_mls(0.5).value_mm == 0.0


def test_bump_mls_matches_definition():
    params = PhantomParams(amplitude=10.0, sigma=8.0)
    _, ann = gen_slice(params)
    y_lo, y_hi = ann.interval
    assert params.y0 == (y_lo + y_hi) / 2
    got = ann.slice_mls(0.5).value_mm
    assert got == pytest.approx(brute_force_mls_mm(params, y_lo, y_hi), abs=1e-12)
    assert abs(got - 5.0) <= 0.3


def test_bump_with_wide_tails_includes_chord_correction():
    params = PhantomParams(amplitude=12.0, sigma=22.0, y0=70.0)
    _, ann = gen_slice(params)
    got = ann.slice_mls(0.5).value_mm
    assert got == pytest.approx(brute_force_mls_mm(params, *ann.interval), abs=1e-12)
    assert got < 6.0


def test_slice_is_deterministic():
    a, _ = gen_slice(PhantomParams(seed=3, amplitude=5.0))
    b, _ = gen_slice(PhantomParams(seed=3, amplitude=5.0))
    c, _ = gen_slice(PhantomParams(seed=4, amplitude=5.0))
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_background_is_zero_and_line_is_visible():
    img, ann = gen_slice(PhantomParams(amplitude=8.0, noise=0.0, texture_contrast=0.0, line_contrast=1.0))
    mask = brain_mask(PhantomParams())
    assert np.all(img[~mask] == 0)
    y = 80
    assert abs(np.argmax(img[y]) - ann.xs[y - ann.interval[0]]) <= 0.5


@pytest.mark.parametrize("kwargs", [{"sigma": 0.0}, {"amplitude": -1.0}, {"x0": 40.0}, {"polarity": 0}])
def test_invalid_params(kwargs):
    with pytest.raises(PhantomError):
        gen_slice(PhantomParams(**kwargs))


def test_annotation_rows_are_wide_enough():
    params = PhantomParams(amplitude=6.0)
    _, ann = gen_slice(params)
    widths = brain_mask(params).sum(axis=1)
    assert np.all(widths[ann.rows] >= 8)
    outside = np.setdiff1d(np.arange(160), ann.rows)
    assert np.all(widths[outside] < 8)


def test_dataset_without_shift():
    [(study, ann)] = gen_dataset(1, 4, shift_distribution=lambda rng: 0.0, seed=5)
    assert ann.gt_mls_mm == 0.0


def test_positive_fraction():
    data = gen_dataset(200, 4, 0.5, seed=11)
    frac = np.mean([a.gt_mls_mm >= 5.0 for _, a in data])
    assert abs(frac - 0.5) <= 0.1


def test_dataset_properties():
    data = gen_dataset(30, 4, 0.5, seed=12)
    n_empty = 0
    for study, ann in data:
        assert study.volume.shape == (4, 160, 160)
        assert study.spacing_mm[1:] == (0.5, 0.5)
        # self-consistency: stored MLS equals the geometry module applied to the curves
        per_slice = [a.slice_mls(0.5) for a in ann.slices]
        assert ann.gt_mls_mm == mls.study_mls(per_slice)[0]
        for img, a in zip(study.volume, ann.slices):
            n_empty += a.is_empty
            if not a.is_empty:
                MidlineAnnotation(a.interval, a.xs, 160)  # re-validate range
                _, flipped = hflip(img, a)
                assert flipped.slice_mls(0.5).value_mm == pytest.approx(a.slice_mls(0.5).value_mm, abs=1e-9)
    assert n_empty > 0


def test_disjoint_seeds():
    def digests(seed):
        return {hashlib.sha256(img.tobytes()).hexdigest() for s, _ in gen_dataset(10, 4, seed=seed) for img in s.volume}

    a, b = digests(1), digests(2)
    assert len(a) == 40 and len(b) == 40 and not a & b


def test_dataset_deterministic():
    a = gen_dataset(3, 2, seed=9)
    b = gen_dataset(3, 2, seed=9)
    for (sa, aa), (sb, ab) in zip(a, b):
        assert sa.volume.tobytes() == sb.volume.tobytes() and aa.gt_mls_mm == ab.gt_mls_mm
