# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pixel/bin vote kernels.

Both kernels walk pixels in raster order and angles in increasing order, so
accumulation order (and therefore every bit of the result) is fixed.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def vote_scatter(real[:, :, ::1] src, const int[:, :, ::1] bin_of, Py_ssize_t n_rho, double scale):
    """Accumulate image values into Hough bins: out[bin_of[y,x,t], t, c] += src[y,x,c]."""
    cdef Py_ssize_t H = src.shape[0], W = src.shape[1], C = src.shape[2]
    cdef Py_ssize_t T = bin_of.shape[2]
    cdef Py_ssize_t y, x, t, c
    cdef real v
    dtype = np.float32 if real is float else np.float64
    out_arr = np.zeros((n_rho, T, C), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    cdef real s = <real>scale
    for y in range(H):
        for x in range(W):
            for c in range(C):
                v = src[y, x, c]
                if v == 0:
                    continue
                for t in range(T):
                    out[bin_of[y, x, t], t, c] += v
    if s != 1:
        for y in range(n_rho):
            for t in range(T):
                for c in range(C):
                    out[y, t, c] *= s
    return out_arr


def vote_gather(real[:, :, ::1] hmap, const int[:, :, ::1] bin_of, double scale):
    """Sum, per pixel, the bins it votes into: out[y,x,c] = scale * sum_t hmap[bin_of[y,x,t], t, c]."""
    cdef Py_ssize_t H = bin_of.shape[0], W = bin_of.shape[1], T = bin_of.shape[2]
    cdef Py_ssize_t C = hmap.shape[2]
    cdef Py_ssize_t y, x, t, c
    cdef real acc
    cdef real s = <real>scale
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((H, W, C), dtype=dtype)
    cdef real[:, :, ::1] out = out_arr
    for y in range(H):
        for x in range(W):
            for c in range(C):
                acc = 0
                for t in range(T):
                    acc = acc + hmap[bin_of[y, x, t], t, c]
                out[y, x, c] = acc * s
    return out_arr
