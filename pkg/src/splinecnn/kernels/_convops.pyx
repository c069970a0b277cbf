# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled im2col / col2im for NHWC convolution (float32 and float64)."""

import numpy as np

cimport cython
cimport numpy as cnp

ctypedef fused real:
    float
    double


@cython.boundscheck(False)
@cython.wraparound(False)
def _im2col_impl(real[:, :, :, ::1] xp, real[:, :, :, :, :, ::1] cols, int stride):
    cdef Py_ssize_t n = cols.shape[0], oh = cols.shape[1], ow = cols.shape[2]
    cdef Py_ssize_t kh = cols.shape[3], kw = cols.shape[4], c = cols.shape[5]
    cdef Py_ssize_t b, y, x, i, j, k
    with nogil:
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            for k in range(c):
                                cols[b, y, x, i, j, k] = xp[b, y * stride + i, x * stride + j, k]


@cython.boundscheck(False)
@cython.wraparound(False)
def _col2im_impl(real[:, :, :, :, :, ::1] dcols, real[:, :, :, ::1] dxp, int stride):
    cdef Py_ssize_t n = dcols.shape[0], oh = dcols.shape[1], ow = dcols.shape[2]
    cdef Py_ssize_t kh = dcols.shape[3], kw = dcols.shape[4], c = dcols.shape[5]
    cdef Py_ssize_t b, y, x, i, j, k
    with nogil:
        for b in range(n):
            for y in range(oh):
                for x in range(ow):
                    for i in range(kh):
                        for j in range(kw):
                            for k in range(c):
                                dxp[b, y * stride + i, x * stride + j, k] += dcols[b, y, x, i, j, k]


def im2col(xp, int kh, int kw, int stride, int oh, int ow):
    xp = np.ascontiguousarray(xp)
    cols = np.empty((xp.shape[0], oh, ow, kh, kw, xp.shape[3]), dtype=xp.dtype)
    _im2col_impl(xp, cols, stride)
    return cols


def col2im(dcols, xp_shape, int stride):
    dcols = np.ascontiguousarray(dcols)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    _col2im_impl(dcols, dxp, stride)
    return dxp
