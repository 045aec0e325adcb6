"""Patchwise 3D U-Net segmentation of lungs and infection in chest CT.

The package covers the whole pipeline: volume I/O, preprocessing,
augmentation, patch extraction and reassembly, a small reverse-mode
autodiff core with 3D layers, the U-Net itself, training, evaluation and a
command line harness (``voxelseg``).
"""
import os as _os

# Must happen before numpy loads BLAS.
_threads = _os.environ.get("VOXELSEG_THREADS")
if _threads:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
