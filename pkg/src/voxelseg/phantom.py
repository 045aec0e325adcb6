"""Synthetic chest-CT-like phantoms with analytically exact labels.

Geometry, all evaluated at voxel centres: an elliptic body cylinder of soft
tissue in air, two lung ellipsoids, a heart ellipsoid that carves a notch
into the left lung, and spherical infection blobs inside the lungs.  The
left lung (class 1, at higher x) is smaller and slightly denser than the
right one, so the two stay distinguishable after mirroring.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from voxelseg.errors import ConfigError
from voxelseg.volume_io import ImageVolume, IntensityKind, LabelVolume, Sample

BACKGROUND, LUNG_LEFT, LUNG_RIGHT, INFECTION = 0, 1, 2, 3


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 32)
    spacing: tuple[float, float, float] = (1.58, 1.58, 2.70)
    air_hu: float = -1000.0
    tissue_hu: float = 40.0
    heart_hu: float = 120.0
    lung_left_hu: float = -840.0
    lung_right_hu: float = -930.0
    infection_hu: float = 75.0
    noise_hu: float = 20.0
    blobs_per_lung: tuple[int, int] = (1, 4)
    blob_radius: tuple[float, float] = (4.0, 7.0)  # voxels
    min_infection_fraction: float = 0.002
    max_infection_fraction: float = 0.03

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ConfigError("phantom shape needs three axes of at least 8 voxels")
        lo, hi = self.blobs_per_lung
        if not 0 <= lo <= hi:
            raise ConfigError("blobs_per_lung must satisfy 0 <= lo <= hi")
        if not 0 < self.blob_radius[0] <= self.blob_radius[1]:
            raise ConfigError("blob_radius must satisfy 0 < lo <= hi")
        if not 0 <= self.min_infection_fraction < self.max_infection_fraction:
            raise ConfigError("infection fraction bounds are inconsistent")


def _ellipsoid(grid, centre, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, centre, radii)) <= 1.0


def generate(spec: PhantomSpec, rng: np.random.Generator, sample_id: str = "phantom") -> Sample:
    nx, ny, nz = spec.shape
    grid = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in spec.shape), indexing="ij")
    x, y, _ = grid
    cx, cy, cz = (nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2
    jit = lambda s: rng.uniform(-s, s)  # noqa: E731

    body = ((x - cx) / (0.45 * nx)) ** 2 + ((y - cy) / (0.36 * ny)) ** 2 <= 1.0
    off = 0.2 * nx
    right = _ellipsoid(grid, (cx - off + jit(1.5), cy + jit(1.5), cz + jit(1.0)),
                       (0.15 * nx * rng.uniform(0.92, 1.08), 0.22 * ny * rng.uniform(0.92, 1.08),
                        0.38 * nz * rng.uniform(0.92, 1.08)))
    left = _ellipsoid(grid, (cx + off + jit(1.5), cy + jit(1.5), cz + jit(1.0)),
                      (0.13 * nx * rng.uniform(0.92, 1.08), 0.20 * ny * rng.uniform(0.92, 1.08),
                       0.36 * nz * rng.uniform(0.92, 1.08)))
    heart = _ellipsoid(grid, (cx + 0.06 * nx, cy - 0.12 * ny, cz - 0.05 * nz),
                       (0.13 * nx, 0.11 * ny, 0.25 * nz))
    left &= ~heart & body
    right &= ~heart & body & ~left

    labels = np.zeros(spec.shape, dtype=np.uint8)
    labels[right] = LUNG_RIGHT
    labels[left] = LUNG_LEFT
    lungs = left | right

    # infection blobs centred on lung voxels, clipped to that lung
    infection = np.zeros(spec.shape, dtype=bool)
    n_total = lungs.size
    lo, hi = spec.blobs_per_lung
    counts = [int(rng.integers(lo, hi + 1)) for _ in (left, right)]
    attempts = 0
    while True:
        for mask, count in zip((left, right), counts):
            idx = np.flatnonzero(mask)
            for _ in range(count):
                centre = np.unravel_index(idx[rng.integers(len(idx))], spec.shape)
                r = rng.uniform(*spec.blob_radius)
                blob = _ellipsoid(grid, centre, (r, r, r * spec.spacing[0] / spec.spacing[2]))
                candidate = infection | (blob & mask)
                if candidate.sum() / n_total <= spec.max_infection_fraction:
                    infection = candidate
        attempts += 1
        if infection.sum() / n_total >= spec.min_infection_fraction or attempts > 50:
            break
        counts = [1, 0] if rng.random() < 0.5 else [0, 1]
    labels[infection] = INFECTION

    hu = np.full(spec.shape, spec.air_hu)
    hu[body] = spec.tissue_hu
    hu[heart & body] = spec.heart_hu
    hu[right] = spec.lung_right_hu
    hu[left] = spec.lung_left_hu
    hu[infection] = spec.infection_hu
    hu += rng.normal(0.0, spec.noise_hu, spec.shape)
    image = ImageVolume(hu.astype(np.float32), tuple(float(s) for s in spec.spacing), IntensityKind.HOUNSFIELD)
    return Sample(sample_id, image, LabelVolume(labels))


def generate_set(n: int, spec: PhantomSpec, seed: int) -> list[Sample]:
    """``n`` phantoms named ``phantom_000`` ...; sample ``i`` uses its own derived stream."""
    if n < 1:
        raise ConfigError("need n >= 1 phantoms")
    seq = np.random.SeedSequence(seed)
    return [generate(spec, np.random.Generator(np.random.PCG64(child)), f"phantom_{i:03d}")
            for i, child in enumerate(seq.spawn(n))]


def class_fractions(labels: LabelVolume) -> np.ndarray:
    return np.bincount(labels.voxels.ravel(), minlength=labels.num_classes) / labels.voxels.size
