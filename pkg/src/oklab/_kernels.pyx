# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops for COO merging and threshold selection."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()

BACKEND = "cython"


def merge_add(cnp.int64_t[::1] ia, double[::1] va,
              cnp.int64_t[::1] ib, double[::1] vb):
    cdef Py_ssize_t na = ia.shape[0], nb = ib.shape[0]
    cdef Py_ssize_t i = 0, j = 0, o = 0
    out_i = np.empty(na + nb, dtype=np.int64)
    out_v = np.empty(na + nb, dtype=np.float64)
    cdef cnp.int64_t[::1] oi = out_i
    cdef double[::1] ov = out_v
    with nogil:
        while i < na and j < nb:
            if ia[i] < ib[j]:
                oi[o] = ia[i]
                ov[o] = 0.0 + va[i]
                i += 1
            elif ib[j] < ia[i]:
                oi[o] = ib[j]
                ov[o] = 0.0 + vb[j]
                j += 1
            else:
                oi[o] = ia[i]
                ov[o] = (0.0 + va[i]) + vb[j]
                i += 1
                j += 1
            o += 1
        while i < na:
            oi[o] = ia[i]
            ov[o] = 0.0 + va[i]
            i += 1
            o += 1
        while j < nb:
            oi[o] = ib[j]
            ov[o] = 0.0 + vb[j]
            j += 1
            o += 1
    return out_i[:o].copy(), out_v[:o].copy()


def select_abs_ge(double[::1] values, double th):
    cdef Py_ssize_t n = values.shape[0], i, c = 0
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] o = out
    with nogil:
        # branch-free: always write, advance only on a hit
        for i in range(n):
            o[c] = i
            c += fabs(values[i]) >= th
    return out[:c].copy()
