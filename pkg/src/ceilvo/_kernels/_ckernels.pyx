# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled image-sampling kernels.

Mirrors ``_pykernels`` exactly; both are exercised by the test-suite.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def bilinear(const double[:, ::1] img, const double[::1] u, const double[::1] v):
    cdef Py_ssize_t n = u.shape[0]
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    out_val = np.zeros(n, dtype=np.float64)
    out_du = np.zeros(n, dtype=np.float64)
    out_dv = np.zeros(n, dtype=np.float64)
    out_ok = np.zeros(n, dtype=np.bool_)
    cdef double[::1] val = out_val
    cdef double[::1] du = out_du
    cdef double[::1] dv = out_dv
    cdef cnp.npy_bool[::1] ok = out_ok
    cdef Py_ssize_t k, x0, y0
    cdef double x, y, fx, fy, i00, i01, i10, i11
    cdef double umax = w - 1, vmax = h - 1
    for k in range(n):
        x = u[k]
        y = v[k]
        if not (x >= 0.0 and x <= umax and y >= 0.0 and y <= vmax):
            continue
        x0 = <Py_ssize_t>floor(x)
        y0 = <Py_ssize_t>floor(y)
        if x0 > w - 2:
            x0 = w - 2
        if y0 > h - 2:
            y0 = h - 2
        fx = x - x0
        fy = y - y0
        i00 = img[y0, x0]
        i01 = img[y0, x0 + 1]
        i10 = img[y0 + 1, x0]
        i11 = img[y0 + 1, x0 + 1]
        val[k] = (1.0 - fy) * ((1.0 - fx) * i00 + fx * i01) + fy * ((1.0 - fx) * i10 + fx * i11)
        du[k] = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
        dv[k] = (1.0 - fx) * (i10 - i00) + fx * (i11 - i01)
        ok[k] = True
    return out_val, out_du, out_dv, out_ok


def downsample2(const double[:, ::1] img):
    cdef Py_ssize_t h = img.shape[0] // 2, w = img.shape[1] // 2
    out = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Py_ssize_t r, c
    for r in range(h):
        for c in range(w):
            o[r, c] = 0.25 * (img[2 * r, 2 * c] + img[2 * r, 2 * c + 1]
                              + img[2 * r + 1, 2 * c] + img[2 * r + 1, 2 * c + 1])
    return out


def central_gradient(const double[:, ::1] img):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    gx_arr = np.empty((h, w), dtype=np.float64)
    gy_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[:, ::1] gy = gy_arr
    cdef Py_ssize_t r, c, rm, rp, cm, cp
    for r in range(h):
        rm = r - 1 if r > 0 else 0
        rp = r + 1 if r < h - 1 else h - 1
        for c in range(w):
            cm = c - 1 if c > 0 else 0
            cp = c + 1 if c < w - 1 else w - 1
            gx[r, c] = 0.5 * (img[r, cp] - img[r, cm])
            gy[r, c] = 0.5 * (img[rp, c] - img[rm, c])
    return gx_arr, gy_arr
