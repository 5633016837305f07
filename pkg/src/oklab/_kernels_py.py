"""Numpy fallback for the compiled kernels; results are bitwise identical."""

import numpy as np

BACKEND = "python"


def merge_add(ia, va, ib, vb):
    idx = np.union1d(ia, ib)
    vals = np.zeros(idx.size, dtype=np.float64)
    vals[np.searchsorted(idx, ia)] += va
    vals[np.searchsorted(idx, ib)] += vb
    return idx.astype(np.int64, copy=False), vals


def select_abs_ge(values, th):
    return np.flatnonzero(np.abs(values) >= th).astype(np.int64, copy=False)
