# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``.

Loop orders mirror the numpy versions exactly so results are bit-identical.
"""
import numpy as np
from libc.math cimport sqrt

ctypedef fused real:
    float
    double


def normalized_blocks(blocks):
    cdef double[:, ::1] b = np.ascontiguousarray(blocks, dtype=np.float64)
    cdef Py_ssize_t n = b.shape[0], d = b.shape[1], k, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] u = out
    cdef double sq
    for k in range(n):
        sq = b[k, 0] * b[k, 0]
        for j in range(1, d):
            sq = sq + b[k, j] * b[k, j]
        sq = sqrt(sq)
        for j in range(d):
            u[k, j] = b[k, j] / sq
    return out


def nearest_blocks(chunks, blocks):
    cdef double[:, ::1] c = np.ascontiguousarray(chunks, dtype=np.float64)
    cdef double[:, ::1] u = normalized_blocks(blocks)
    cdef Py_ssize_t m = c.shape[0], n = u.shape[0], d = u.shape[1]
    cdef Py_ssize_t i, k, j, best_k
    cdef double acc, best
    out = np.empty(m, dtype=np.int64)
    cdef long long[::1] o = out
    with nogil:
        for i in range(m):
            best_k = 0
            best = 0.0
            for k in range(n):
                acc = c[i, 0] * u[k, 0]
                for j in range(1, d):
                    acc = acc + c[i, j] * u[k, j]
                if k == 0 or acc > best:
                    best = acc
                    best_k = k
            o[i] = best_k
    return out


def _scatter_add(real[:, ::1] target, const long long[::1] idx, const real[:, ::1] values):
    cdef Py_ssize_t m = idx.shape[0], d = target.shape[1], i, j, r
    with nogil:
        for i in range(m):
            r = idx[i]
            for j in range(d):
                target[r, j] = target[r, j] + values[i, j]


def scatter_add_rows(target, indices, values):
    idx = np.ascontiguousarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= target.shape[0]):
        raise IndexError("row index out of range")
    vals = np.ascontiguousarray(values, dtype=target.dtype)
    if target.flags.c_contiguous:
        _scatter_add(target, idx, vals)
    else:
        tmp = np.ascontiguousarray(target)
        _scatter_add(tmp, idx, vals)
        target[...] = tmp


def _im2col(const real[:, :, :, ::1] x, real[:, ::1] out, int kh, int kw, int stride, int pad,
            int oh, int ow):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t b, ch, i, j, y, z, row, col, yy, xx
    with nogil:
        for b in range(n):
            for y in range(oh):
                for z in range(ow):
                    row = (b * oh + y) * ow + z
                    col = 0
                    for ch in range(c):
                        for i in range(kh):
                            yy = y * stride + i - pad
                            for j in range(kw):
                                xx = z * stride + j - pad
                                if 0 <= yy < h and 0 <= xx < w:
                                    out[row, col] = x[b, ch, yy, xx]
                                else:
                                    out[row, col] = 0
                                col = col + 1


def im2col(x, kh, kw, stride, pad):
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.empty((n * oh * ow, c * kh * kw), dtype=x.dtype)
    _im2col(x, out, kh, kw, stride, pad, oh, ow)
    return out


def _col2im(const real[:, ::1] cols, real[:, :, :, ::1] out, int kh, int kw, int stride,
            int oh, int ow):
    cdef Py_ssize_t n = out.shape[0], c = out.shape[1]
    cdef Py_ssize_t b, ch, i, j, y, z, row, col
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for b in range(n):
                    for ch in range(c):
                        col = (ch * kh + i) * kw + j
                        for y in range(oh):
                            for z in range(ow):
                                row = (b * oh + y) * ow + z
                                out[b, ch, y * stride + i, z * stride + j] += cols[row, col]


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.ascontiguousarray(cols)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    _col2im(cols, out, kh, kw, stride, oh, ow)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)
