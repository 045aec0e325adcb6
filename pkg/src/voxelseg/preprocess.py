"""Intensity clipping, grayscale normalization, z-scoring and resampling.

Resampling uses voxel centres at ``index * spacing``: output voxel ``i``
samples source coordinate ``i * target / source`` along each axis, with
coordinates past the last voxel clamped to the edge.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from voxelseg.errors import ConfigError, DegenerateRange, WrongIntensityKind
from voxelseg.volume_io import ImageVolume, IntensityKind, LabelVolume, Sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    clip_min: float = -1250.0
    clip_max: float = 250.0
    grayscale_lo: float = 0.0
    grayscale_hi: float = 255.0
    target_spacing: tuple[float, float, float] = (1.58, 1.58, 2.70)
    zscore_epsilon: float = 1e-8

    def __post_init__(self):
        if not self.clip_min < self.clip_max:
            raise ConfigError("clip_min must be below clip_max")
        if len(self.target_spacing) != 3 or any(s <= 0 for s in self.target_spacing):
            raise ConfigError("target_spacing needs three positive values")


def clip_intensity(vol: ImageVolume, lo: float = -1250.0, hi: float = 250.0) -> ImageVolume:
    if vol.intensity_kind is not IntensityKind.HOUNSFIELD:
        raise WrongIntensityKind(f"clipping applies to HU volumes, got {vol.intensity_kind.value}")
    return vol.with_voxels(np.clip(vol.voxels, lo, hi))


def normalize_grayscale(vol: ImageVolume, clip_min: float = -1250.0, clip_max: float = 250.0,
                        lo: float = 0.0, hi: float = 255.0) -> ImageVolume:
    """Map ``[clip_min, clip_max]`` linearly onto ``[lo, hi]``."""
    if vol.intensity_kind is not IntensityKind.HOUNSFIELD:
        raise WrongIntensityKind(f"expected a clipped HU volume, got {vol.intensity_kind.value}")
    if clip_max == clip_min:
        raise DegenerateRange("clip_min == clip_max")
    v = vol.voxels.astype(np.float64)
    out = (v - clip_min) * ((hi - lo) / (clip_max - clip_min)) + lo
    return vol.with_voxels(out.astype(vol.voxels.dtype), intensity_kind=IntensityKind.GRAYSCALE)


def zscore(vol: ImageVolume, epsilon: float = 1e-8) -> ImageVolume:
    """Per-volume standardization with population statistics."""
    v = vol.voxels.astype(np.float64)
    std = v.std()
    if std < epsilon:
        out = np.zeros_like(v)
    else:
        out = (v - v.mean()) / std
    return vol.with_voxels(out.astype(vol.voxels.dtype), intensity_kind=IntensityKind.ZSCORED)


def resampled_shape(shape, spacing, target_spacing) -> tuple[int, int, int]:
    """Per axis ``round_half_up(n * s / t)``, at least 1."""
    return tuple(max(1, int(np.floor(n * s / t + 0.5)))
                 for n, s, t in zip(shape, spacing, target_spacing))


def _source_coords(n_in, n_out, s_in, s_out):
    c = np.arange(n_out, dtype=np.float64) * (s_out / s_in)
    return np.minimum(c, n_in - 1)


def _linear_axis(a: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    i0 = np.floor(coords).astype(np.intp)
    i1 = np.minimum(i0 + 1, a.shape[axis] - 1)
    frac = coords - i0
    shape = [1] * a.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    return np.take(a, i0, axis=axis) * (1.0 - frac) + np.take(a, i1, axis=axis) * frac


def _identity(shape, spacing, target) -> bool:
    return tuple(spacing) == tuple(float(t) for t in target)


def resample_image(vol: ImageVolume, target_spacing) -> ImageVolume:
    """Trilinear resampling (three separable linear passes)."""
    target = tuple(float(t) for t in target_spacing)
    if _identity(vol.shape, vol.spacing, target):
        return vol.with_voxels(vol.voxels.copy())
    out_shape = resampled_shape(vol.shape, vol.spacing, target)
    a = vol.voxels.astype(np.float64)
    for axis in range(3):
        c = _source_coords(vol.shape[axis], out_shape[axis], vol.spacing[axis], target[axis])
        a = _linear_axis(a, axis, c)
    return vol.with_voxels(a.astype(vol.voxels.dtype), spacing=target)


def resample_labels(labels: LabelVolume, spacing, target_spacing) -> LabelVolume:
    """Nearest-neighbour resampling on the same grid convention as images."""
    target = tuple(float(t) for t in target_spacing)
    spacing = tuple(float(s) for s in spacing)
    if _identity(labels.shape, spacing, target):
        return LabelVolume(labels.voxels.copy(), labels.num_classes)
    out_shape = resampled_shape(labels.shape, spacing, target)
    a = labels.voxels
    for axis in range(3):
        c = _source_coords(labels.shape[axis], out_shape[axis], spacing[axis], target[axis])
        a = np.take(a, np.floor(c + 0.5).astype(np.intp), axis=axis)
    return LabelVolume(a, labels.num_classes)


def preprocess_sample(sample: Sample, cfg: PreprocessConfig = PreprocessConfig()) -> Sample:
    """Clip -> grayscale -> z-score -> resample.

    Volumes that already arrive on the 0-255 grayscale scale skip clipping
    and normalization; the decision is taken from ``intensity_kind`` only.
    """
    img = sample.image
    if img.intensity_kind is IntensityKind.HOUNSFIELD:
        img = clip_intensity(img, cfg.clip_min, cfg.clip_max)
        img = normalize_grayscale(img, cfg.clip_min, cfg.clip_max, cfg.grayscale_lo, cfg.grayscale_hi)
    else:
        log.info("sample %s is %s: skipping clip/normalize", sample.id, img.intensity_kind.value)
    img = zscore(img, cfg.zscore_epsilon)
    labels = sample.labels
    if labels is not None:
        labels = resample_labels(labels, img.spacing, cfg.target_spacing)
    img = resample_image(img, cfg.target_spacing)
    return Sample(sample.id, img, labels)
