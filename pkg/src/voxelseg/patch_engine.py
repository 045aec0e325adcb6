"""Patch extraction for training and overlap-averaged reassembly for inference."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from voxelseg.augment import AugmentConfig, apply_pipeline, derive_rng
from voxelseg.errors import ConfigError, CoverageGap, ShapeMismatch
from voxelseg.volume_io import LabelVolume, Sample


@dataclass(frozen=True)
class PatchGridConfig:
    patch_shape: tuple[int, int, int] = (160, 160, 80)
    overlap: tuple[int, int, int] = (80, 80, 40)
    batch_size: int = 2

    def __post_init__(self):
        if len(self.patch_shape) != 3 or len(self.overlap) != 3:
            raise ConfigError("patch_shape and overlap need three entries")
        for p, o in zip(self.patch_shape, self.overlap):
            if not 0 <= o < p:
                raise ConfigError(f"overlap {self.overlap} must satisfy 0 <= overlap < patch {self.patch_shape}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def stride(self) -> tuple[int, int, int]:
        return tuple(p - o for p, o in zip(self.patch_shape, self.overlap))


class Patch(NamedTuple):
    origin: tuple[int, int, int]
    image_window: np.ndarray
    label_window: np.ndarray | None  # one-hot, patch_shape + (num_classes,)


class PadRecord(NamedTuple):
    before: tuple[int, int, int]
    original_shape: tuple[int, int, int]

    @property
    def is_empty(self) -> bool:
        return not any(self.before)


def pad_to_min(sample: Sample, patch_shape) -> tuple[Sample, PadRecord]:
    """Pad every axis shorter than the patch, as symmetrically as possible.

    Images are padded with their minimum intensity, labels with background.
    """
    shape = sample.image.shape
    widths = []
    for n, p in zip(shape, patch_shape):
        extra = max(0, p - n)
        widths.append((extra // 2, extra - extra // 2))
    record = PadRecord(tuple(w[0] for w in widths), tuple(shape))
    if not any(a or b for a, b in widths):
        return sample, record
    vox = sample.image.voxels
    img = np.pad(vox, widths, mode="constant", constant_values=vox.min())
    lbl = None
    if sample.labels is not None:
        lbl = LabelVolume(np.pad(sample.labels.voxels, widths), sample.labels.num_classes)
    return Sample(sample.id, sample.image.with_voxels(img), lbl), record


def crop_back(volume: np.ndarray, record: PadRecord) -> np.ndarray:
    """Undo :func:`pad_to_min` on the leading three axes of ``volume``."""
    sl = tuple(slice(b, b + n) for b, n in zip(record.before, record.original_shape))
    return volume[sl]


def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    return np.eye(num_classes, dtype=dtype)[labels]


def _window(a: np.ndarray, origin, shape) -> np.ndarray:
    return a[tuple(slice(o, o + s) for o, s in zip(origin, shape))]


def random_crop(sample: Sample, patch_shape, rng: np.random.Generator) -> Patch:
    """Crop at an origin drawn uniformly from every valid position per axis."""
    shape = sample.image.shape
    if any(n < p for n, p in zip(shape, patch_shape)):
        raise ShapeMismatch(f"volume {shape} is smaller than patch {tuple(patch_shape)}; pad first")
    origin = tuple(int(rng.integers(0, n - p + 1)) for n, p in zip(shape, patch_shape))
    img = _window(sample.image.voxels, origin, patch_shape).copy()
    lbl = None
    if sample.labels is not None:
        lbl = one_hot(_window(sample.labels.voxels, origin, patch_shape), sample.labels.num_classes)
    return Patch(origin, img, lbl)


def axis_positions(n: int, patch: int, stride: int) -> list[int]:
    if n < patch:
        raise ShapeMismatch(f"axis length {n} is shorter than the patch ({patch})")
    pos = list(range(0, n - patch + 1, stride))
    if pos[-1] + patch < n:
        pos.append(n - patch)
    return pos


def grid_positions(vol_shape, patch_shape, overlap) -> list[tuple[int, int, int]]:
    """Grid origins at multiples of the stride; the last one per axis is
    clamped to ``n - patch`` so it ends flush with the volume."""
    per_axis = [axis_positions(n, p, p - o) for n, p, o in zip(vol_shape, patch_shape, overlap)]
    return [tuple(o) for o in itertools.product(*per_axis)]


def slice_grid(volume: np.ndarray, patch_shape, overlap) -> list[tuple[tuple[int, int, int], np.ndarray]]:
    """Cut ``volume`` (3 spatial axes, optional trailing axes) into grid patches."""
    return [(o, _window(volume, o, patch_shape)) for o in grid_positions(volume.shape[:3], patch_shape, overlap)]


def reassemble(prob_patches: Iterable[tuple[Sequence[int], np.ndarray]], vol_shape,
               num_classes: int) -> np.ndarray:
    """Average overlapping patch probabilities back into one volume.

    Sums are accumulated in float64 (exact for a handful of float32 terms),
    divided by the per-voxel coverage count, then cast to the patch dtype.
    """
    vol_shape = tuple(vol_shape)
    acc = np.zeros(vol_shape + (num_classes,), dtype=np.float64)
    count = np.zeros(vol_shape, dtype=np.int64)
    dtype = None
    for origin, probs in prob_patches:
        probs = np.asarray(probs)
        dtype = probs.dtype if dtype is None else dtype
        if probs.shape[-1] != num_classes:
            raise ShapeMismatch(f"patch has {probs.shape[-1]} classes, expected {num_classes}")
        sl = tuple(slice(o, o + s) for o, s in zip(origin, probs.shape[:3]))
        acc[sl] += probs
        count[sl] += 1
    if dtype is None or (count == 0).any():
        missing = int((count == 0).sum())
        raise CoverageGap(f"{missing} voxels are not covered by any patch")
    return (acc / count[..., None]).astype(dtype)


def coverage_count(vol_shape, patch_shape, overlap) -> np.ndarray:
    count = np.zeros(tuple(vol_shape), dtype=np.int64)
    for o in grid_positions(vol_shape, patch_shape, overlap):
        count[tuple(slice(a, a + p) for a, p in zip(o, patch_shape))] += 1
    return count


def _base_seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2 ** 63))
    return int(rng)


def training_batch(dataset: Sequence[Sample], cfg: PatchGridConfig, aug_cfg: AugmentConfig,
                   rng, epoch: int = 0, batch_index: int = 0,
                   stream: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """One on-the-fly batch: per slot draw a sample (with replacement),
    augment it, crop a random patch and one-hot its labels.

    ``rng`` is an integer seed (or a Generator, from which one is drawn).
    Each slot gets its own generator derived from
    ``(seed, stream, epoch, batch_index, slot)``, so slots are independent of
    build order; ``stream`` separates e.g. training from validation batches.

    Returns images ``(b, px, py, pz, 1)`` and one-hot labels
    ``(b, px, py, pz, C)``.
    """
    if not dataset:
        raise ValueError("training_batch needs a non-empty dataset")
    seed = _base_seed(rng)
    images, labels = [], []
    for slot in range(cfg.batch_size):
        slot_rng = derive_rng(seed, stream, epoch, batch_index, slot)
        sample = dataset[int(slot_rng.integers(len(dataset)))]
        if sample.labels is None:
            raise ValueError(f"sample {sample.id} has no labels")
        sample = apply_pipeline(sample, aug_cfg, slot_rng)
        sample, _ = pad_to_min(sample, cfg.patch_shape)
        patch = random_crop(sample, cfg.patch_shape, slot_rng)
        images.append(patch.image_window[..., None])
        labels.append(patch.label_window)
    return np.stack(images).astype(np.float32), np.stack(labels)
