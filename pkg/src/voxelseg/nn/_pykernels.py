"""Numpy im2col / col2im, used when the compiled extension is unavailable.

Mirrors ``_ckernels`` exactly, including the order in which ``col2im3d``
accumulates overlapping contributions.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_len(n, k, s):
    return (n + 2 * (k // 2) - k) // s + 1


def im2col3d(x, k, stride=1):
    x = np.ascontiguousarray(x)
    p = k // 2
    b = x.shape[0]
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    # (b, xo, yo, zo, c, kx, ky, kz) -> (b, xo, yo, zo, kx, ky, kz, c)
    win = win.transpose(0, 1, 2, 3, 5, 6, 7, 4)
    rows = b * win.shape[1] * win.shape[2] * win.shape[3]
    return np.ascontiguousarray(win).reshape(rows, -1)


def col2im3d(cols, k, stride, xshape):
    b, X, Y, Z, c = xshape
    p = k // 2
    s = stride
    xo, yo, zo = (_out_len(n, k, s) for n in (X, Y, Z))
    cv = cols.reshape(b, xo, yo, zo, k, k, k, c)
    out = np.zeros((b, X + 2 * p, Y + 2 * p, Z + 2 * p, c), dtype=cols.dtype)
    # decreasing offset order == the row-major scatter order of the C kernel
    for dx in reversed(range(k)):
        for dy in reversed(range(k)):
            for dz in reversed(range(k)):
                out[:, dx:dx + s * (xo - 1) + 1:s,
                    dy:dy + s * (yo - 1) + 1:s,
                    dz:dz + s * (zo - 1) + 1:s] += cv[:, :, :, :, dx, dy, dz]
    return np.ascontiguousarray(out[:, p:p + X, p:p + Y, p:p + Z])
