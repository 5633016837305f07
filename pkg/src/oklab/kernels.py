"""Kernel dispatch: the Cython build when importable, numpy otherwise.

Set ``OKLAB_PURE_PYTHON=1`` to force the fallback.
"""

import os

import numpy as np

from . import _kernels_py

if os.environ.get("OKLAB_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.BACKEND


def merge_add(ia, va, ib, vb):
    """Union two sorted unique index arrays, adding values on shared indices."""
    return _impl.merge_add(
        np.ascontiguousarray(ia, dtype=np.int64),
        np.ascontiguousarray(va, dtype=np.float64),
        np.ascontiguousarray(ib, dtype=np.int64),
        np.ascontiguousarray(vb, dtype=np.float64),
    )


def select_abs_ge(values, th):
    """Positions where ``|values| >= th``, ascending."""
    return _impl.select_abs_ge(np.ascontiguousarray(values, dtype=np.float64), float(th))
