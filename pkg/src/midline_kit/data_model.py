"""Core types and the on-disk study / annotation / prediction formats.

Study directory::

    meta.json        {"id": str, "shape": [S, H, W], "spacing_mm": [sz, sy, sx]}
    volume.raw       S*H*W float32 little-endian, C-order (slice, row, col)
    annotation.json  {"slices": [null | {"y_lo": int, "y_hi": int, "xs": [float, ...]}, ...]}
"""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mls

META_NAME = "meta.json"
VOLUME_NAME = "volume.raw"
ANNOTATION_NAME = "annotation.json"
RAW_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    pass


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Study:
    id: str
    volume: np.ndarray  # S x H x W
    spacing_mm: tuple[float, float, float]  # (inter-slice, row, column)

    def __post_init__(self):
        vol = np.asarray(self.volume)
        if vol.ndim != 3 or min(vol.shape) < 1:
            raise FormatError(f"volume must be S x H x W with S >= 1, got shape {vol.shape}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise FormatError(f"spacing must be three positive values, got {self.spacing_mm}")
        object.__setattr__(self, "volume", _frozen(vol, np.float32))
        object.__setattr__(self, "spacing_mm", spacing)

    @property
    def slices(self) -> list[np.ndarray]:
        return list(self.volume)

    @property
    def shape(self) -> tuple[int, int]:
        return self.volume.shape[1:]


@dataclass(frozen=True, eq=False)
class MidlineAnnotation:
    """Per-row sub-pixel midline over the inclusive row range [y_lo, y_hi].

    ``interval is None`` means the midline is undefined on this slice.
    """

    interval: tuple[int, int] | None
    xs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    width: int | None = None

    def __post_init__(self):
        xs = np.asarray(self.xs, dtype=np.float64).reshape(-1)
        if self.interval is None:
            if xs.size:
                raise FormatError("empty interval must carry no xs")
        else:
            y_lo, y_hi = (int(v) for v in self.interval)
            if y_lo < 0 or y_hi < y_lo:
                raise FormatError(f"invalid interval [{y_lo}, {y_hi}]")
            if xs.size != y_hi - y_lo + 1:
                raise FormatError(f"xs has {xs.size} values for interval [{y_lo}, {y_hi}] of length {y_hi - y_lo + 1}")
            if not np.all(np.isfinite(xs)):
                raise FormatError("xs must be finite")
            if self.width is not None and (np.any(xs < 0) or np.any(xs >= self.width)):
                raise FormatError(f"xs outside [0, {self.width})")
            object.__setattr__(self, "interval", (y_lo, y_hi))
        object.__setattr__(self, "xs", _frozen(xs))

    @classmethod
    def empty(cls, width=None) -> "MidlineAnnotation":
        return cls(None, np.zeros(0), width)

    @property
    def is_empty(self) -> bool:
        return self.interval is None

    @property
    def rows(self) -> np.ndarray:
        if self.interval is None:
            return np.zeros(0, dtype=int)
        return np.arange(self.interval[0], self.interval[1] + 1)

    def dense(self, height: int) -> tuple[np.ndarray, np.ndarray]:
        """(x per row with zeros outside I, boolean limits mask) over ``height`` rows."""
        x = np.zeros(height)
        mask = np.zeros(height, dtype=bool)
        if self.interval is not None:
            y_lo, y_hi = self.interval
            if y_hi >= height:
                raise FormatError(f"interval [{y_lo}, {y_hi}] exceeds image height {height}")
            x[y_lo:y_hi + 1] = self.xs
            mask[y_lo:y_hi + 1] = True
        return x, mask

    def slice_mls(self, px_mm: float) -> mls.SliceMls | None:
        if self.interval is None:
            return None
        curve = np.zeros(self.interval[1] + 1)
        curve[self.interval[0]:] = self.xs
        return mls.try_slice_mls(curve, self.interval, px_mm)


@dataclass(frozen=True, eq=False)
class StudyAnnotation:
    slices: tuple[MidlineAnnotation, ...]
    px_mm: float  # column spacing used to convert the horizontal deviation to mm
    gt_mls_mm: float | None = field(init=False)
    gt_slice: int | None = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(self.slices))
        result = mls.study_mls([a.slice_mls(self.px_mm) for a in self.slices])
        object.__setattr__(self, "gt_mls_mm", None if result is None else result[0])
        object.__setattr__(self, "gt_slice", None if result is None else result[1])


@dataclass(frozen=True, eq=False)
class SlicePrediction:
    curve: np.ndarray  # one x per row of the prediction grid
    lower: np.ndarray
    upper: np.ndarray
    interval: tuple[int, int] | None
    slice_mls_mm: float | None = None
    argmax_row: int | None = None

    def __post_init__(self):
        for name in ("curve", "lower", "upper"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if not (self.curve.shape == self.lower.shape == self.upper.shape):
            raise FormatError("curve and band lengths differ")
        if np.any(self.lower > self.upper):
            raise FormatError("lower confidence curve exceeds upper")
        if self.interval is not None:
            object.__setattr__(self, "interval", (int(self.interval[0]), int(self.interval[1])))
        if self.slice_mls_mm is not None and self.interval is None:
            raise FormatError("slice MLS given without an interval")


@dataclass(frozen=True, eq=False)
class StudyPrediction:
    id: str
    slices: tuple[SlicePrediction, ...]
    grid_spacing_mm: tuple[float, float] = (0.5, 0.5)
    source_spacing_mm: tuple[float, float] = (0.5, 0.5)
    coverage: float = 0.95
    limits_threshold: float = 0.5
    threshold_mm: float = mls.SIGNIFICANT_MM
    mls_mm: float | None = field(init=False)
    argmax_slice: int | None = field(init=False)
    significant: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "slices", tuple(self.slices))
        object.__setattr__(self, "grid_spacing_mm", tuple(float(s) for s in self.grid_spacing_mm))
        object.__setattr__(self, "source_spacing_mm", tuple(float(s) for s in self.source_spacing_mm))
        result = mls.study_mls([s.slice_mls_mm for s in self.slices])
        object.__setattr__(self, "mls_mm", None if result is None else result[0])
        object.__setattr__(self, "argmax_slice", None if result is None else result[1])
        object.__setattr__(self, "significant", result is not None and mls.classify_significant(result[0], self.threshold_mm))


# --------------------------------------------------------------------------- IO

def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    _atomic_write_bytes(Path(path), (json.dumps(obj, indent=1, sort_keys=False) + "\n").encode())


def load_study(path) -> Study:
    path = Path(path)
    meta_path, vol_path = path / META_NAME, path / VOLUME_NAME
    for p in (meta_path, vol_path):
        if not p.is_file():
            raise FileNotFoundError(f"missing {p}")
    meta = json.loads(meta_path.read_text())
    try:
        s, h, w = (int(v) for v in meta["shape"])
        spacing = tuple(float(v) for v in meta["spacing_mm"])
        study_id = str(meta["id"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{meta_path}: malformed metadata ({exc})") from None
    raw = vol_path.read_bytes()
    expected = s * h * w * RAW_DTYPE.itemsize
    if len(raw) != expected:
        raise FormatError(f"{vol_path}: {len(raw)} bytes, expected {expected} for shape {(s, h, w)}")
    volume = np.frombuffer(raw, dtype=RAW_DTYPE).reshape(s, h, w)
    return Study(study_id, volume, spacing)


def save_study(path, study: Study) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {"id": study.id, "shape": list(study.volume.shape), "spacing_mm": list(study.spacing_mm)}
    _atomic_write_bytes(path / VOLUME_NAME, np.ascontiguousarray(study.volume, dtype=RAW_DTYPE).tobytes())
    write_json(path / META_NAME, meta)


def annotation_from_json(entry, width=None) -> MidlineAnnotation:
    if entry is None:
        return MidlineAnnotation.empty(width)
    try:
        return MidlineAnnotation((int(entry["y_lo"]), int(entry["y_hi"])), entry["xs"], width)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed slice annotation ({exc})") from None


def load_annotations(path, study: Study) -> StudyAnnotation:
    """Read ``annotation.json`` (a file, or a study directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / ANNOTATION_NAME
    doc = json.loads(path.read_text())
    entries = doc.get("slices") if isinstance(doc, dict) else None
    if not isinstance(entries, list):
        raise FormatError(f"{path}: expected an object with a 'slices' list")
    n_slices, (h, w) = study.volume.shape[0], study.shape
    if len(entries) != n_slices:
        raise FormatError(f"{path}: {len(entries)} slice annotations for a {n_slices}-slice study")
    slices = []
    for i, entry in enumerate(entries):
        try:
            ann = annotation_from_json(entry, w)
            if ann.interval is not None and ann.interval[1] >= h:
                raise FormatError(f"interval {ann.interval} exceeds image height {h}")
        except FormatError as exc:
            raise FormatError(f"{path}: slice {i}: {exc}") from None
        slices.append(ann)
    return StudyAnnotation(tuple(slices), px_mm=study.spacing_mm[2])


def save_annotations(path, annotation: StudyAnnotation) -> None:
    path = Path(path)
    if path.is_dir():
        path = path / ANNOTATION_NAME
    slices = [
        None if a.interval is None else {"y_lo": a.interval[0], "y_hi": a.interval[1], "xs": [float(x) for x in a.xs]}
        for a in annotation.slices
    ]
    write_json(path, {"slices": slices})


def _floats(a):
    return [float(v) for v in a]


def prediction_to_json(pred: StudyPrediction) -> dict:
    return {
        "id": pred.id,
        "mls_mm": pred.mls_mm,
        "argmax_slice": pred.argmax_slice,
        "significant": pred.significant,
        "threshold_mm": pred.threshold_mm,
        "coverage": pred.coverage,
        "limits_threshold": pred.limits_threshold,
        "grid_spacing_mm": list(pred.grid_spacing_mm),
        "source_spacing_mm": list(pred.source_spacing_mm),
        "slices": [
            {
                "interval": None if s.interval is None else list(s.interval),
                "slice_mls_mm": s.slice_mls_mm,
                "argmax_row": s.argmax_row,
                "curve": _floats(s.curve),
                "lower": _floats(s.lower),
                "upper": _floats(s.upper),
            }
            for s in pred.slices
        ],
    }


def prediction_from_json(doc: dict) -> StudyPrediction:
    try:
        slices = tuple(
            SlicePrediction(
                np.asarray(s["curve"], dtype=float),
                np.asarray(s["lower"], dtype=float),
                np.asarray(s["upper"], dtype=float),
                None if s["interval"] is None else tuple(s["interval"]),
                s["slice_mls_mm"],
                s.get("argmax_row"),
            )
            for s in doc["slices"]
        )
        pred = StudyPrediction(
            str(doc["id"]), slices,
            grid_spacing_mm=tuple(doc.get("grid_spacing_mm", (0.5, 0.5))),
            source_spacing_mm=tuple(doc.get("source_spacing_mm", (0.5, 0.5))),
            coverage=float(doc.get("coverage", 0.95)),
            limits_threshold=float(doc.get("limits_threshold", 0.5)),
            threshold_mm=float(doc.get("threshold_mm", mls.SIGNIFICANT_MM)),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed prediction document ({exc})") from None
    return pred


def save_predictions(path, pred: StudyPrediction) -> None:
    write_json(path, prediction_to_json(pred))


def load_predictions(path) -> StudyPrediction:
    return prediction_from_json(json.loads(Path(path).read_text()))
