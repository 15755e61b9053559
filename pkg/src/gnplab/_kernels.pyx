# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see ``_kernels_py`` for the reference semantics."""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(x, int k, int pad):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1
    cdef Py_ssize_t kk = k * k, ncol = c * kk
    out = np.empty((b * ho * wo, ncol), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t n, ci, i, j, r, col, hi, wi, row
    with nogil:
        for n in range(b):
            for r in range(ho):
                for col in range(wo):
                    row = (n * ho + r) * wo + col
                    for ci in range(c):
                        for i in range(k):
                            hi = r + i - pad
                            for j in range(k):
                                wi = col + j - pad
                                if hi < 0 or hi >= h or wi < 0 or wi >= w:
                                    ov[row, ci * kk + i * k + j] = 0.0
                                else:
                                    ov[row, ci * kk + i * k + j] = xv[n, ci, hi, wi]
    return out


def col2im(cols, Py_ssize_t b, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w, int k, int pad):
    cdef Py_ssize_t ho = h + 2 * pad - k + 1, wo = w + 2 * pad - k + 1
    cdef Py_ssize_t kk = k * k
    cdef double[:, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(b * ho * wo, c * kk)
    out = np.zeros((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t n, ci, i, j, r, col, hi, wi
    # Offset-major loop order matches the numpy reference accumulation order.
    with nogil:
        for n in range(b):
            for ci in range(c):
                for i in range(k):
                    for j in range(k):
                        for r in range(ho):
                            hi = r + i - pad
                            if hi < 0 or hi >= h:
                                continue
                            for col in range(wo):
                                wi = col + j - pad
                                if wi < 0 or wi >= w:
                                    continue
                                ov[n, ci, hi, wi] += cv[(n * ho + r) * wo + col, ci * kk + i * k + j]
    return out


def avgpool2_forward(x):
    cdef double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t b = xv.shape[0], c = xv.shape[1]
    cdef Py_ssize_t h = xv.shape[2] // 2, w = xv.shape[3] // 2
    out = np.empty((b, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t n, ci, i, j
    cdef double s
    with nogil:
        for n in range(b):
            for ci in range(c):
                for i in range(h):
                    for j in range(w):
                        s = xv[n, ci, 2 * i, 2 * j] + xv[n, ci, 2 * i, 2 * j + 1]
                        s = s + xv[n, ci, 2 * i + 1, 2 * j]
                        s = s + xv[n, ci, 2 * i + 1, 2 * j + 1]
                        ov[n, ci, i, j] = s * 0.25
    return out


def avgpool2_backward(dout):
    cdef double[:, :, :, ::1] dv = np.ascontiguousarray(dout, dtype=np.float64)
    cdef Py_ssize_t b = dv.shape[0], c = dv.shape[1], h = dv.shape[2], w = dv.shape[3]
    out = np.empty((b, c, 2 * h, 2 * w), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef Py_ssize_t n, ci, i, j
    cdef double g
    with nogil:
        for n in range(b):
            for ci in range(c):
                for i in range(h):
                    for j in range(w):
                        g = dv[n, ci, i, j] * 0.25
                        ov[n, ci, 2 * i, 2 * j] = g
                        ov[n, ci, 2 * i, 2 * j + 1] = g
                        ov[n, ci, 2 * i + 1, 2 * j] = g
                        ov[n, ci, 2 * i + 1, 2 * j + 1] = g
    return out


def sign_step_project(x, g, orig, double alpha, double eps):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64).ravel()
    cdef double[::1] ov0 = np.ascontiguousarray(orig, dtype=np.float64).ravel()
    out = np.empty(np.shape(x), dtype=np.float64)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double y, s, lo, hi
    with nogil:
        for i in range(n):
            s = gv[i]
            if s > 0:
                y = xv[i] + alpha
            elif s < 0:
                y = xv[i] - alpha
            else:
                y = xv[i] + alpha * s
            lo = ov0[i] - eps
            hi = ov0[i] + eps
            if y < lo:
                y = lo
            if y > hi:
                y = hi
            if y < 0.0:
                y = 0.0
            if y > 1.0:
                y = 1.0
            ov[i] = y
    return out
