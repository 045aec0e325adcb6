"""Kernel backend selection.

The compiled Cython module is used when importable; set
``VOXELSEG_KERNELS=python`` to force the numpy fallback.
"""
import os

if os.environ.get("VOXELSEG_KERNELS", "").lower() == "python":
    from voxelseg.nn import _pykernels as _impl

    BACKEND = "python"
else:
    try:
        from voxelseg.nn import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:
        from voxelseg.nn import _pykernels as _impl

        BACKEND = "python"

im2col3d = _impl.im2col3d
col2im3d = _impl.col2im3d

__all__ = ["BACKEND", "im2col3d", "col2im3d"]
