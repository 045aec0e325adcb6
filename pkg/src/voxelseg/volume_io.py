"""Volume data model plus NIfTI-1 and MVF readers/writers.

In memory a volume is a numpy array indexed ``[x, y, z]``.  On disk every
format stores voxels x-fastest (NIfTI's native order), i.e. the array is
serialized in Fortran order.

MVF is the internal cache format: ``<name>.json`` (shape, spacing, intensity
kind, class count) next to ``<name>.img.raw`` (little-endian float32) and,
for labelled samples, ``<name>.lbl.raw`` (uint8 class indices).
"""
from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from voxelseg.errors import (
    CorruptHeader,
    DimensionalityError,
    IoError,
    MissingSidecar,
    ShapeMismatch,
    UnsupportedDatatype,
    ValidationError,
)

NUM_CLASSES = 4
CLASS_NAMES = ("background", "lung_left", "lung_right", "infection")


class IntensityKind(str, enum.Enum):
    HOUNSFIELD = "HounsfieldLike"
    GRAYSCALE = "Grayscale0to255"
    ZSCORED = "ZScored"


@dataclass(frozen=True, eq=False)
class ImageVolume:
    voxels: np.ndarray
    spacing: tuple[float, float, float]
    intensity_kind: IntensityKind = IntensityKind.HOUNSFIELD

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.dtype.kind != "f":
            vox = vox.astype(np.float32)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ShapeMismatch(f"image must be a non-empty 3-D grid, got shape {vox.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and math.isfinite(s) for s in spacing):
            raise ValidationError(f"voxel spacing must be three positive numbers, got {self.spacing}")
        if not np.isfinite(vox).all():
            raise ValidationError("image voxels must be finite")
        object.__setattr__(self, "voxels", vox)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "intensity_kind", IntensityKind(self.intensity_kind))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def with_voxels(self, voxels, **changes) -> "ImageVolume":
        return replace(self, voxels=voxels, **changes)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    voxels: np.ndarray
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        vox = np.asarray(self.voxels)
        if vox.ndim != 3 or min(vox.shape) < 1:
            raise ShapeMismatch(f"labels must be a non-empty 3-D grid, got shape {vox.shape}")
        if vox.size and (vox.min() < 0 or vox.max() >= self.num_classes):
            raise ValidationError(f"label values must lie in [0, {self.num_classes})")
        object.__setattr__(self, "voxels", vox.astype(np.uint8, copy=False))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass(frozen=True, eq=False)
class Sample:
    id: str
    image: ImageVolume
    labels: LabelVolume | None = field(default=None)

    def __post_init__(self):
        if self.labels is not None and self.labels.shape != self.image.shape:
            raise ShapeMismatch(f"sample {self.id}: image {self.image.shape} vs labels {self.labels.shape}")


# --- NIfTI-1 ---------------------------------------------------------------

_HDR_SIZE = 348
_VOX_OFFSET = 352
_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}


def _parse_header(hdr: bytes, path) -> dict:
    if len(hdr) < _HDR_SIZE:
        raise CorruptHeader(f"{path}: file shorter than a NIfTI-1 header")
    (sizeof_hdr,) = struct.unpack_from("<i", hdr, 0)
    if sizeof_hdr != _HDR_SIZE:
        raise CorruptHeader(f"{path}: sizeof_hdr is {sizeof_hdr}, expected 348 (little-endian)")
    magic = hdr[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise CorruptHeader(f"{path}: bad magic {magic!r}")
    dim = struct.unpack_from("<8h", hdr, 40)
    datatype, _bitpix = struct.unpack_from("<2h", hdr, 70)
    pixdim = struct.unpack_from("<8f", hdr, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from("<3f", hdr, 108)
    return dict(dim=dim, datatype=datatype, pixdim=pixdim, vox_offset=vox_offset,
                scl_slope=scl_slope, scl_inter=scl_inter, single_file=magic == b"n+1\x00")


def read_nifti(path, intensity_kind: IntensityKind = IntensityKind.HOUNSFIELD) -> ImageVolume:
    """Read an uncompressed NIfTI-1 volume (int16 or float32 payload)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    h = _parse_header(raw, path)
    if h["dim"][0] != 3:
        raise DimensionalityError(f"{path}: dim[0] = {h['dim'][0]}, only 3-D volumes are supported")
    shape = tuple(int(n) for n in h["dim"][1:4])
    if min(shape) < 1:
        raise CorruptHeader(f"{path}: non-positive dimension in {shape}")
    spacing = tuple(float(s) for s in h["pixdim"][1:4])
    if not all(s > 0 and math.isfinite(s) for s in spacing):
        raise CorruptHeader(f"{path}: pixdim[1..3] = {spacing} must be positive")
    if h["datatype"] not in _DTYPES:
        raise UnsupportedDatatype(f"{path}: datatype code {h['datatype']} (only 4=int16, 16=float32)")
    dtype = _DTYPES[h["datatype"]]
    count = int(np.prod(shape))
    if h["single_file"]:
        payload, offset = raw, int(h["vox_offset"])
        if offset < _HDR_SIZE:
            raise CorruptHeader(f"{path}: vox_offset {h['vox_offset']} inside the header")
    else:
        img_path = path.with_suffix(".img")
        try:
            payload = img_path.read_bytes()
        except OSError as exc:
            raise IoError(f"cannot read {img_path}: {exc}") from exc
        offset = int(h["vox_offset"])
    if len(payload) - offset < count * dtype.itemsize:
        raise CorruptHeader(f"{path}: payload holds fewer than {count} voxels")
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    vox = data.reshape(shape, order="F")
    slope, inter = h["scl_slope"], h["scl_inter"]
    if slope != 0 and math.isfinite(slope):
        inter = inter if math.isfinite(inter) else 0.0
        vox = vox.astype(np.float64) * slope + inter
    return ImageVolume(np.ascontiguousarray(vox, dtype=np.float32), spacing, intensity_kind)


def _build_header(shape, spacing, datatype: int, bitpix: int) -> bytes:
    hdr = bytearray(_VOX_OFFSET)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, datatype, bitpix)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    # scl_slope = 0 means "no scaling", keeping float payloads bit-exact
    struct.pack_into("<3f", hdr, 108, float(_VOX_OFFSET), 0.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # xyzt_units: millimetres
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(volume: ImageVolume, path) -> Path:
    """Write ``volume`` as a single-file float32 NIfTI-1 (352-byte preamble)."""
    path = Path(path)
    payload = np.asarray(volume.voxels, dtype="<f4").tobytes(order="F")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(_build_header(volume.shape, volume.spacing, 16, 32) + payload)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def write_nifti_labels(labels: LabelVolume, spacing, path) -> Path:
    """Write class indices as an int16 NIfTI-1 (readable by :func:`read_nifti`)."""
    path = Path(path)
    payload = np.asarray(labels.voxels, dtype="<i2").tobytes(order="F")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(_build_header(labels.shape, spacing, 4, 16) + payload)
    return path


def read_nifti_labels(path, num_classes: int = NUM_CLASSES) -> LabelVolume:
    vol = read_nifti(path)
    vox = vol.voxels
    if not np.array_equal(vox, np.round(vox)):
        raise ValidationError(f"{path}: label volume holds non-integer values")
    return LabelVolume(vox.astype(np.int64), num_classes)


# --- MVF -------------------------------------------------------------------

def _mvf_base(path) -> Path:
    p = Path(path)
    if p.name.endswith(".json"):
        return p.with_name(p.name[: -len(".json")])
    return p


def write_mvf(sample: Sample, path) -> Path:
    """Write ``sample`` to ``<path>.json`` + ``<path>.img.raw`` (+ ``.lbl.raw``)."""
    base = _mvf_base(path)
    img = sample.image
    meta = {
        "id": sample.id,
        "shape": list(img.shape),
        "spacing": list(img.spacing),
        "intensity_kind": img.intensity_kind.value,
        "num_classes": sample.labels.num_classes if sample.labels is not None else NUM_CLASSES,
        "has_labels": sample.labels is not None,
        "voxel_order": "x-fastest",
    }
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        base.with_name(base.name + ".img.raw").write_bytes(
            np.asarray(img.voxels, dtype="<f4").tobytes(order="F"))
        if sample.labels is not None:
            base.with_name(base.name + ".lbl.raw").write_bytes(
                np.asarray(sample.labels.voxels, dtype=np.uint8).tobytes(order="F"))
        base.with_name(base.name + ".json").write_text(json.dumps(meta, indent=2) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write MVF sample {base}: {exc}") from exc
    return base


def _read_raw(path: Path, dtype, shape) -> np.ndarray:
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    count = int(np.prod(shape))
    if len(raw) != count * np.dtype(dtype).itemsize:
        raise ShapeMismatch(f"{path}: {len(raw)} bytes on disk, sidecar shape {tuple(shape)} "
                            f"needs {count * np.dtype(dtype).itemsize}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape, order="F")


def read_mvf(path) -> Sample:
    base = _mvf_base(path)
    sidecar = base.with_name(base.name + ".json")
    if not sidecar.exists():
        raise MissingSidecar(f"{sidecar} not found")
    meta = json.loads(sidecar.read_text())
    shape = tuple(meta["shape"])
    vox = _read_raw(base.with_name(base.name + ".img.raw"), "<f4", shape)
    image = ImageVolume(np.ascontiguousarray(vox, dtype=np.float32), tuple(meta["spacing"]),
                        IntensityKind(meta["intensity_kind"]))
    labels = None
    lbl_path = base.with_name(base.name + ".lbl.raw")
    if meta.get("has_labels", lbl_path.exists()):
        lbl = _read_raw(lbl_path, np.uint8, shape)
        labels = LabelVolume(np.ascontiguousarray(lbl), int(meta.get("num_classes", NUM_CLASSES)))
    return Sample(meta.get("id", base.name), image, labels)


def list_mvf(directory) -> list[Path]:
    """MVF base paths in a directory, sorted by name."""
    return sorted(p.with_name(p.name[: -len(".json")]) for p in Path(directory).glob("*.json")
                  if p.with_name(p.name[: -len(".json")] + ".img.raw").exists())
