# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled disc-stamping kernel. Must stay bit-identical to ``_raster_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, ceil

cnp.import_array()


def stamp_discs(double[:, ::1] canvas,
                const double[::1] ys,
                const double[::1] xs,
                const double[::1] radii,
                const double[::1] amps):
    cdef Py_ssize_t n = ys.shape[0]
    cdef Py_ssize_t h = canvas.shape[0]
    cdef Py_ssize_t w = canvas.shape[1]
    cdef Py_ssize_t k, i, j, i0, i1, j0, j1
    cdef double cy, cx, r, a, reach, dy, dx, d, v
    for k in range(n):
        cy = ys[k]
        cx = xs[k]
        r = radii[k]
        a = amps[k]
        reach = r + 0.5
        i0 = <Py_ssize_t>floor(cy - reach)
        i1 = <Py_ssize_t>ceil(cy + reach)
        j0 = <Py_ssize_t>floor(cx - reach)
        j1 = <Py_ssize_t>ceil(cx + reach)
        if i0 < 0:
            i0 = 0
        if j0 < 0:
            j0 = 0
        if i1 > h - 1:
            i1 = h - 1
        if j1 > w - 1:
            j1 = w - 1
        for i in range(i0, i1 + 1):
            dy = i - cy
            for j in range(j0, j1 + 1):
                dx = j - cx
                d = sqrt(dy * dy + dx * dx)
                v = reach - d
                if v <= 0.0:
                    continue
                if v > 1.0:
                    v = 1.0
                v = a * v
                if v > canvas[i, j]:
                    canvas[i, j] = v
