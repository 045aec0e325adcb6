"""On-the-fly augmentation of z-scored samples.

Seven methods, each triggered independently with probability ``p_apply``
and applied in this fixed order: mirror, rotation+scaling (one fused affine
resample), elastic deformation, brightness, contrast, gamma, Gaussian noise.
Images are resampled trilinearly, labels with nearest neighbour, through
the same coordinate map.

Randomness comes from numpy's PCG64 ``Generator``; per-slot generators for
batch construction are derived with :func:`derive_rng`, which hashes
``(seed, epoch, batch, slot)`` through ``SeedSequence``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from voxelseg.errors import ConfigError, DegenerateRange
from voxelseg.volume_io import ImageVolume, LabelVolume, Sample


@dataclass(frozen=True)
class AugmentConfig:
    p_apply: float = 0.15
    mirror_axes: tuple[int, ...] = (0, 1, 2)
    rotation_range: float = 15.0
    scale_range: tuple[float, float] = (0.85, 1.25)
    elastic_alpha: float = 10.0
    elastic_sigma: float = 5.0
    brightness_range: tuple[float, float] = (-0.3, 0.3)
    contrast_range: tuple[float, float] = (0.65, 1.5)
    gamma_range: tuple[float, float] = (0.7, 1.5)
    noise_sigma_range: tuple[float, float] = (0.0, 0.1)

    def __post_init__(self):
        if not 0.0 <= self.p_apply <= 1.0:
            raise ConfigError("p_apply must lie in [0, 1]")
        checks = [
            (self.scale_range, 1.0), (self.brightness_range, 0.0),
            (self.contrast_range, 1.0), (self.gamma_range, 1.0),
        ]
        for (lo, hi), ident in checks:
            if not lo <= ident <= hi:
                raise ConfigError(f"range ({lo}, {hi}) must contain its identity value {ident}")
        if self.rotation_range < 0 or self.elastic_alpha < 0 or self.elastic_sigma <= 0:
            raise ConfigError("rotation_range and elastic_alpha must be >= 0, elastic_sigma > 0")
        lo, hi = self.noise_sigma_range
        if not 0.0 <= lo <= hi:
            raise ConfigError("noise_sigma_range must satisfy 0 <= lo <= hi")
        if any(a not in (0, 1, 2) for a in self.mirror_axes):
            raise ConfigError("mirror_axes must be a subset of {0, 1, 2}")

    @classmethod
    def identity(cls, p_apply: float = 1.0) -> "AugmentConfig":
        """Every method enabled but with parameters pinned at their identity."""
        return cls(p_apply=p_apply, mirror_axes=(), rotation_range=0.0, scale_range=(1.0, 1.0),
                   elastic_alpha=0.0, brightness_range=(0.0, 0.0), contrast_range=(1.0, 1.0),
                   gamma_range=(1.0, 1.0), noise_sigma_range=(0.0, 0.0))


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(*keys: int) -> np.random.Generator:
    """Generator keyed by a tuple of non-negative ints, e.g. (seed, epoch, batch, slot)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(k) for k in keys])))


def _replace(sample: Sample, image: np.ndarray, labels: np.ndarray | None) -> Sample:
    img = sample.image.with_voxels(image.astype(sample.image.voxels.dtype, copy=False))
    lbl = None if labels is None else LabelVolume(labels, sample.labels.num_classes)
    return Sample(sample.id, img, lbl)


# --- spatial ---------------------------------------------------------------

def mirror(sample: Sample, axes) -> Sample:
    axes = tuple(sorted(set(axes)))
    if not axes:
        return sample
    img = np.flip(sample.image.voxels, axis=axes).copy()
    lbl = None if sample.labels is None else np.flip(sample.labels.voxels, axis=axes).copy()
    return _replace(sample, img, lbl)


def rotation_matrix(angles_deg) -> np.ndarray:
    """``Rz @ Ry @ Rx`` for rotations (degrees) about the x, y and z axes."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    rx = np.array([[1, 0, 0], [0, np.cos(ax), -np.sin(ax)], [0, np.sin(ax), np.cos(ax)]])
    ry = np.array([[np.cos(ay), 0, np.sin(ay)], [0, 1, 0], [-np.sin(ay), 0, np.cos(ay)]])
    rz = np.array([[np.cos(az), -np.sin(az), 0], [np.sin(az), np.cos(az), 0], [0, 0, 1]])
    return rz @ ry @ rx


def _sample_at(sample: Sample, coords: np.ndarray, mode: str, fill_image: float) -> Sample:
    img = ndimage.map_coordinates(sample.image.voxels.astype(np.float64), coords, order=1,
                                  mode=mode, cval=fill_image)
    lbl = None
    if sample.labels is not None:
        lbl = ndimage.map_coordinates(sample.labels.voxels, coords, order=0, mode=mode, cval=0)
    return _replace(sample, img, lbl)


def affine_spatial(sample: Sample, angles, scale: float) -> Sample:
    """Rotate about the volume centre and scale isotropically about it.

    A voxel at ``p`` moves to ``c + R (p - c) / scale``; so ``scale > 1``
    shrinks the content.  Voxels sampled from outside the field take the
    image minimum (labels: background).
    """
    shape = sample.image.shape
    rot = rotation_matrix(angles)
    centre = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    grid = np.indices(shape, dtype=np.float64).reshape(3, -1) - centre[:, None]
    # inverse map: source = c + scale * R^T (out - c)
    src = scale * (rot.T @ grid) + centre[:, None]
    coords = src.reshape((3,) + shape)
    return _sample_at(sample, coords, "constant", float(sample.image.voxels.min()))


def elastic_deform(sample: Sample, alpha: float, sigma: float, rng: np.random.Generator) -> Sample:
    """Displace every voxel by ``alpha * gaussian_filter(N(0, 1), sigma)`` per axis."""
    shape = sample.image.shape
    noise = rng.standard_normal((3,) + shape)
    if alpha == 0.0:
        return sample
    disp = np.stack([ndimage.gaussian_filter(n, sigma, mode="constant") for n in noise]) * alpha
    coords = np.indices(shape, dtype=np.float64) + disp
    return _sample_at(sample, coords, "nearest", 0.0)


# --- intensity -------------------------------------------------------------

def brightness(vol: ImageVolume, shift: float) -> ImageVolume:
    if shift == 0.0:
        return vol
    return vol.with_voxels((vol.voxels + shift).astype(vol.voxels.dtype))


def contrast(vol: ImageVolume, factor: float) -> ImageVolume:
    if factor == 1.0:
        return vol
    v = vol.voxels.astype(np.float64)
    m = v.mean()
    return vol.with_voxels((m + factor * (v - m)).astype(vol.voxels.dtype))


def gamma(vol: ImageVolume, g: float) -> ImageVolume:
    """Gamma on the min-max normalized volume, rescaled back to [min, max].

    Raises :class:`DegenerateRange` for a constant volume.
    """
    v = vol.voxels.astype(np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        raise DegenerateRange("gamma needs a non-constant volume")
    if g == 1.0:
        return vol
    out = ((v - lo) / (hi - lo)) ** g * (hi - lo) + lo
    return vol.with_voxels(out.astype(vol.voxels.dtype))


def gaussian_noise(vol: ImageVolume, sigma: float, rng: np.random.Generator) -> ImageVolume:
    if sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if sigma == 0.0:
        return vol
    noise = rng.normal(0.0, sigma, vol.shape)
    return vol.with_voxels((vol.voxels + noise).astype(vol.voxels.dtype))


def _with_image(sample: Sample, vol: ImageVolume) -> Sample:
    return Sample(sample.id, vol, sample.labels)


def apply_pipeline(sample: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Run the seven augmentation methods, each with probability ``cfg.p_apply``."""
    p = cfg.p_apply

    if rng.random() < p:
        axes = [a for a in cfg.mirror_axes if rng.random() < 0.5]
        sample = mirror(sample, axes)

    if rng.random() < p:
        r = cfg.rotation_range
        angles = rng.uniform(-r, r, 3) if r > 0 else np.zeros(3)
        scale = rng.uniform(*cfg.scale_range)
        sample = affine_spatial(sample, angles, scale)

    if rng.random() < p:
        sample = elastic_deform(sample, cfg.elastic_alpha, cfg.elastic_sigma, rng)

    if rng.random() < p:
        shift = rng.uniform(*cfg.brightness_range) * float(sample.image.voxels.std())
        sample = _with_image(sample, brightness(sample.image, shift))

    if rng.random() < p:
        sample = _with_image(sample, contrast(sample.image, rng.uniform(*cfg.contrast_range)))

    if rng.random() < p:
        g = rng.uniform(*cfg.gamma_range)
        try:
            sample = _with_image(sample, gamma(sample.image, g))
        except DegenerateRange:
            pass

    if rng.random() < p:
        sample = _with_image(sample, gaussian_noise(sample.image, rng.uniform(*cfg.noise_sigma_range), rng))

    return sample
