# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for channels-last 3D convolution.

Row order of the column matrix is (batch, x, y, z) of the output grid, column
order is (dx, dy, dz, channel). ``col2im3d`` accumulates each output element's
contributions in the same order as the numpy fallback (decreasing offset),
so both backends agree bit for bit.
"""
import numpy as np

ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _out_len(Py_ssize_t n, Py_ssize_t k, Py_ssize_t s) nogil:
    return (n + 2 * (k // 2) - k) // s + 1


cdef void _im2col(real[:, :, :, :, ::1] x, Py_ssize_t k, Py_ssize_t s,
                  real[:, ::1] cols) noexcept nogil:
    cdef Py_ssize_t B = x.shape[0], X = x.shape[1], Y = x.shape[2], Z = x.shape[3]
    cdef Py_ssize_t C = x.shape[4], p = k // 2
    cdef Py_ssize_t Xo = _out_len(X, k, s), Yo = _out_len(Y, k, s), Zo = _out_len(Z, k, s)
    cdef Py_ssize_t n, i, j, l, dx, dy, dz, sx, sy, sz, c, off, row = 0
    cdef real* dst
    cdef real* srcp
    for n in range(B):
        for i in range(Xo):
            for j in range(Yo):
                for l in range(Zo):
                    dst = &cols[row, 0]
                    off = 0
                    for dx in range(k):
                        sx = i * s + dx - p
                        for dy in range(k):
                            sy = j * s + dy - p
                            for dz in range(k):
                                sz = l * s + dz - p
                                if sx < 0 or sx >= X or sy < 0 or sy >= Y or sz < 0 or sz >= Z:
                                    for c in range(C):
                                        dst[off + c] = 0
                                else:
                                    srcp = &x[n, sx, sy, sz, 0]
                                    for c in range(C):
                                        dst[off + c] = srcp[c]
                                off += C
                    row += 1


cdef void _col2im(real[:, ::1] cols, Py_ssize_t k, Py_ssize_t s,
                  real[:, :, :, :, ::1] out) noexcept nogil:
    # Row-outer traversal: each output element receives its contributions in
    # decreasing offset order, which the numpy fallback reproduces exactly.
    cdef Py_ssize_t B = out.shape[0], X = out.shape[1], Y = out.shape[2], Z = out.shape[3]
    cdef Py_ssize_t C = out.shape[4], p = k // 2
    cdef Py_ssize_t Xo = _out_len(X, k, s), Yo = _out_len(Y, k, s), Zo = _out_len(Z, k, s)
    cdef Py_ssize_t n, i, j, l, dx, dy, dz, sx, sy, sz, c, off, row = 0
    cdef real* src
    cdef real* dst
    for n in range(B):
        for i in range(Xo):
            for j in range(Yo):
                for l in range(Zo):
                    src = &cols[row, 0]
                    off = 0
                    for dx in range(k):
                        sx = i * s + dx - p
                        for dy in range(k):
                            sy = j * s + dy - p
                            for dz in range(k):
                                sz = l * s + dz - p
                                if (0 <= sx < X) and (0 <= sy < Y) and (0 <= sz < Z):
                                    dst = &out[n, sx, sy, sz, 0]
                                    for c in range(C):
                                        dst[c] += src[off + c]
                                off += C
                    row += 1


def im2col3d(x, Py_ssize_t k, Py_ssize_t stride=1):
    x = np.ascontiguousarray(x)
    B, X, Y, Z, C = x.shape
    rows = B * _out_len(X, k, stride) * _out_len(Y, k, stride) * _out_len(Z, k, stride)
    cols = np.empty((rows, k * k * k * C), dtype=x.dtype)
    if x.dtype == np.float32:
        _im2col[float](x, k, stride, cols)
    elif x.dtype == np.float64:
        _im2col[double](x, k, stride, cols)
    else:
        raise TypeError(f"unsupported dtype {x.dtype}")
    return cols


def col2im3d(cols, Py_ssize_t k, Py_ssize_t stride, tuple xshape):
    cols = np.ascontiguousarray(cols)
    out = np.zeros(xshape, dtype=cols.dtype)
    if cols.dtype == np.float32:
        _col2im[float](cols, k, stride, out)
    elif cols.dtype == np.float64:
        _col2im[double](cols, k, stride, out)
    else:
        raise TypeError(f"unsupported dtype {cols.dtype}")
    return out
