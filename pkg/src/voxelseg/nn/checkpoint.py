"""Parameter checkpoints: ``<base>.json`` manifest + ``<base>.bin`` payload.

The payload holds every array in manifest order, little-endian, C order,
with no padding between arrays.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from voxelseg.errors import IoError

FORMAT = "voxelseg-checkpoint"


def _base(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".bin") else p


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(base.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            fh.write(np.ascontiguousarray(le).tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name})
    manifest = {"format": FORMAT, "version": 1, "tensors": entries, "meta": meta or {}}
    base.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return base


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    base = _base(path)
    try:
        manifest = json.loads(base.with_suffix(".json").read_text())
        payload = base.with_suffix(".bin").read_bytes()
    except FileNotFoundError as exc:
        raise IoError(f"checkpoint not found: {exc.filename}") from exc
    if manifest.get("format") != FORMAT:
        raise IoError(f"{base}.json is not a {FORMAT} manifest")
    arrays = {}
    offset = 0
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(payload):
            raise IoError(f"checkpoint payload truncated at tensor {e['name']!r}")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=offset)
        arrays[e["name"]] = arr.astype(dt.newbyteorder("="), copy=True).reshape(e["shape"])
        offset += nbytes
    if offset != len(payload):
        raise IoError("checkpoint payload has trailing bytes")
    return arrays, manifest["meta"]
