"""Confusion-based metrics, cross-validation splits, fold aggregation and overlays."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from PIL import Image

from voxelseg.errors import IndexOutOfRange, InvalidK, ShapeMismatch
from voxelseg.volume_io import ImageVolume, LabelVolume

LUNG_CLASSES = (1, 2)
INFECTION_CLASS = 3
METRICS = ("dsc", "sens", "spec")
REPORT_COLUMNS = ("fold", "lungs_dsc", "lungs_sens", "lungs_spec", "covid_dsc", "covid_sens", "covid_spec")


class ConfusionCounts(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _voxels(v) -> np.ndarray:
    return v.voxels if isinstance(v, LabelVolume) else np.asarray(v)


def confusion(pred, gt, cls: int) -> ConfusionCounts:
    """One-vs-rest counts for class ``cls``."""
    p, g = _voxels(pred), _voxels(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    pp, gg = p == cls, g == cls
    tp = int(np.count_nonzero(pp & gg))
    fp = int(np.count_nonzero(pp & ~gg))
    fn = int(np.count_nonzero(~pp & gg))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def dsc(c: ConfusionCounts) -> float:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def sensitivity(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)


def specificity(c: ConfusionCounts) -> float:
    return _ratio(c.tn, c.tn + c.fp)


@dataclass(frozen=True)
class ClassMetrics:
    dsc: float
    sens: float
    spec: float

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "ClassMetrics":
        return cls(dsc(c), sensitivity(c), specificity(c))


@dataclass(frozen=True)
class SampleMetrics:
    lungs: ClassMetrics
    infection: ClassMetrics

    def row(self) -> dict[str, float]:
        out = {f"lungs_{k}": v for k, v in asdict(self.lungs).items()}
        out.update({f"covid_{k}": v for k, v in asdict(self.infection).items()})
        return out


def evaluate_sample(pred, gt) -> SampleMetrics:
    """Lung row = mean of the two lung classes' metrics; infection row as is."""
    per_lung = [ClassMetrics.from_counts(confusion(pred, gt, c)) for c in LUNG_CLASSES]
    lungs = ClassMetrics(*(float(np.mean([getattr(m, k) for m in per_lung])) for k in METRICS))
    return SampleMetrics(lungs, ClassMetrics.from_counts(confusion(pred, gt, INFECTION_CLASS)))


def cv_split(n_samples: int, k: int, seed: int) -> list[list[int]]:
    """Shuffle ``range(n_samples)`` with ``seed`` and deal it into ``k`` folds.

    The first ``n % k`` folds get one extra sample; indices within a fold
    are sorted.
    """
    if k < 2:
        raise InvalidK(f"k must be >= 2, got {k}")
    if n_samples < k:
        raise InvalidK(f"cannot split {n_samples} samples into {k} folds")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n_samples)
    sizes = [n_samples // k + (1 if i < n_samples % k else 0) for i in range(k)]
    bounds = np.cumsum([0] + sizes)
    return [sorted(int(i) for i in order[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


@dataclass
class CvReport:
    folds: list[dict[str, float]]
    average: dict[str, float]
    samples: list[list[dict]]  # per fold: {"id": ..., **metrics}

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for i, row in enumerate(self.folds):
                w.writerow([i] + [repr(row[c]) for c in REPORT_COLUMNS[1:]])
            w.writerow(["AVG"] + [repr(self.average[c]) for c in REPORT_COLUMNS[1:]])
        return path

    def write_json(self, path) -> Path:
        path = Path(path)
        doc = {"folds": self.folds, "average": self.average, "samples": self.samples}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return path


def aggregate(fold_sample_metrics: Sequence[Sequence[Mapping]]) -> CvReport:
    """Per fold: median of each metric over its samples; AVG: mean of fold medians.

    Each sample entry is a :class:`SampleMetrics` or a mapping with the
    report column names (plus optionally ``id``).
    """
    folds, samples = [], []
    for fold in fold_sample_metrics:
        if not fold:
            raise ValueError("every fold needs at least one sample")
        rows = [dict(s.row()) if isinstance(s, SampleMetrics) else dict(s) for s in fold]
        samples.append(rows)
        folds.append({c: float(np.median([r[c] for r in rows])) for c in REPORT_COLUMNS[1:]})
    average = {c: float(np.mean([f[c] for f in folds])) for c in REPORT_COLUMNS[1:]}
    return CvReport(folds, average, samples)


# --- overlays ----------------------------------------------------------------

OVERLAY_ALPHA = 0.4
LUNG_RGB = (0.0, 0.0, 255.0)
INFECTION_RGB = (255.0, 0.0, 0.0)


def overlay_slice(image: ImageVolume, labels: LabelVolume, axis: int, index: int) -> np.ndarray:
    """RGB uint8 slice: min-max windowed grayscale with blended label colours."""
    if axis not in (0, 1, 2):
        raise IndexOutOfRange(f"axis must be 0, 1 or 2, got {axis}")
    if image.shape != labels.shape:
        raise ShapeMismatch(f"image {image.shape} vs labels {labels.shape}")
    n = image.shape[axis]
    if not 0 <= index < n:
        raise IndexOutOfRange(f"slice {index} outside [0, {n}) on axis {axis}")
    img = np.take(image.voxels, index, axis=axis).astype(np.float64)
    lbl = np.take(labels.voxels, index, axis=axis)
    lo, hi = img.min(), img.max()
    gray = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo) * 255.0
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    for classes, colour in ((LUNG_CLASSES, LUNG_RGB), ((INFECTION_CLASS,), INFECTION_RGB)):
        mask = np.isin(lbl, classes)
        rgb[mask] = (1.0 - OVERLAY_ALPHA) * rgb[mask] + OVERLAY_ALPHA * np.asarray(colour)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def render_overlay(image: ImageVolume, labels: LabelVolume, axis: int, slice_index: int, out_path) -> Path:
    """Write the overlay as a PNG; slice rows follow the first remaining axis."""
    rgb = overlay_slice(image, labels, axis, slice_index)
    out_path = Path(out_path)
    Image.fromarray(rgb).save(out_path, format="PNG")
    return out_path


def overlay_name(sample_id: str, axis: int, index: int) -> str:
    return f"{sample_id}_{'xyz'[axis]}{index}.png"
