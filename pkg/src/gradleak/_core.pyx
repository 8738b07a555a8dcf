# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: circulant-operator assembly and the TV inner loop.

Mirrors gradleak._pure function for function; see there for the
semantics.  The scatter loops write identical values to identical
positions, so results match the pure backend exactly; the TV iteration
agrees to rounding (summation order differs).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def weight_circulant_fill(double[:, :, :, ::1] kernel, Py_ssize_t stride,
                          Py_ssize_t in_height, Py_ssize_t in_width,
                          double[:, ::1] out):
    cdef Py_ssize_t oc = kernel.shape[0]
    cdef Py_ssize_t ic = kernel.shape[1]
    cdef Py_ssize_t k = kernel.shape[2]
    cdef Py_ssize_t oh = (in_height - k) // stride + 1
    cdef Py_ssize_t ow = (in_width - k) // stride + 1
    cdef Py_ssize_t o, y, x, c, dy, dx, row
    for o in range(oc):
        for y in range(oh):
            for x in range(ow):
                row = (o * oh + y) * ow + x
                for c in range(ic):
                    for dy in range(k):
                        for dx in range(k):
                            out[row, (c * in_height + y * stride + dy) * in_width
                                     + x * stride + dx] = kernel[o, c, dy, dx]


def gradient_circulant_fill(double[:, :, ::1] grad_z, Py_ssize_t kernel_size,
                            Py_ssize_t stride, Py_ssize_t in_channels,
                            Py_ssize_t in_height, Py_ssize_t in_width,
                            double[:, ::1] out):
    cdef Py_ssize_t oc = grad_z.shape[0]
    cdef Py_ssize_t oh = grad_z.shape[1]
    cdef Py_ssize_t ow = grad_z.shape[2]
    cdef Py_ssize_t k = kernel_size
    cdef Py_ssize_t o, c, dy, dx, y, x, row
    cdef double g
    for o in range(oc):
        for c in range(in_channels):
            for dy in range(k):
                for dx in range(k):
                    row = ((o * in_channels + c) * k + dy) * k + dx
                    for y in range(oh):
                        for x in range(ow):
                            out[row, (c * in_height + y * stride + dy) * in_width
                                     + x * stride + dx] = grad_z[o, y, x]


def tv_chambolle(double[:, ::1] image, double weight, double eps,
                 int max_iters):
    cdef Py_ssize_t rows = image.shape[0]
    cdef Py_ssize_t cols = image.shape[1]
    out_arr = np.empty((rows, cols), dtype=np.float64)
    px_arr = np.zeros((rows, cols), dtype=np.float64)
    py_arr = np.zeros((rows, cols), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] px = px_arr
    cdef double[:, ::1] py = py_arr
    cdef double tau = 0.25
    cdef double tw = tau / weight
    cdef double e, e_init = 0.0, e_prev = 0.0
    cdef double dv, gxv, gyv, nrm, scale
    cdef Py_ssize_t i, j
    cdef int it
    for i in range(rows):
        for j in range(cols):
            out[i, j] = image[i, j]
    for it in range(max_iters):
        e = 0.0
        if it > 0:
            for i in range(rows):
                for j in range(cols):
                    dv = -(px[i, j] + py[i, j])
                    if i > 0:
                        dv += px[i - 1, j]
                    if j > 0:
                        dv += py[i, j - 1]
                    out[i, j] = image[i, j] + dv
                    e += dv * dv
        for i in range(rows):
            for j in range(cols):
                gxv = out[i + 1, j] - out[i, j] if i + 1 < rows else 0.0
                gyv = out[i, j + 1] - out[i, j] if j + 1 < cols else 0.0
                nrm = sqrt(gxv * gxv + gyv * gyv)
                e += weight * nrm
                scale = 1.0 + nrm * tw
                px[i, j] = (px[i, j] - tau * gxv) / scale
                py[i, j] = (py[i, j] - tau * gyv) / scale
        e /= rows * cols
        if it == 0:
            e_init = e
            e_prev = e
        elif fabs(e_prev - e) < eps * e_init:
            break
        else:
            e_prev = e
    return out_arr
