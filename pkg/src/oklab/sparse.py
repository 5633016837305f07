"""COO sparse gradients, top-k selection and the 32-bit wire codec."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from statistics import NormalDist
from typing import Sequence

import numpy as np

from . import kernels
from .errors import DegenerateDistribution, InvalidArgument, WireFormatError

_EMPTY_I = np.empty(0, dtype=np.int64)
_EMPTY_V = np.empty(0, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class SparseGrad:
    """Sparse vector of length ``n`` with strictly increasing ``indices``."""

    n: int
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)
        if self.n < 1:
            raise InvalidArgument(f"n must be positive, got {self.n}")
        if idx.ndim != 1 or val.ndim != 1 or idx.size != val.size:
            raise InvalidArgument("indices and values must be 1-d and equally long")
        if idx.size:
            if idx[0] < 0 or idx[-1] >= self.n:
                raise InvalidArgument("index out of range")
            if idx.size > 1 and np.any(np.diff(idx) <= 0):
                raise InvalidArgument("indices must be strictly increasing")

    @classmethod
    def empty(cls, n: int) -> SparseGrad:
        return cls(n, _EMPTY_I, _EMPTY_V)

    @classmethod
    def from_dense(cls, dense) -> SparseGrad:
        """Keep every nonzero of ``dense``."""
        dense = np.asarray(dense, dtype=np.float64)
        idx = np.flatnonzero(dense)
        return cls(dense.size, idx, dense[idx])

    @classmethod
    def from_dict(cls, n: int, items: dict) -> SparseGrad:
        keys = sorted(items)
        return cls(n, np.array(keys, dtype=np.int64), np.array([items[i] for i in keys], dtype=np.float64))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.n, dtype=np.float64)
        out[self.indices] = self.values
        return out

    def to_dict(self) -> dict:
        return dict(zip(self.indices.tolist(), self.values.tolist()))

    def restrict(self, lo: int, hi: int) -> SparseGrad:
        a, b = np.searchsorted(self.indices, [lo, hi])
        return SparseGrad(self.n, self.indices[a:b], self.values[a:b])

    def same_as(self, other: SparseGrad) -> bool:
        """Exact (bitwise) equality of structure and values."""
        return (
            self.n == other.n
            and np.array_equal(self.indices, other.indices)
            and self.values.tobytes() == other.values.tobytes()
        )

    def __repr__(self):
        return f"SparseGrad(n={self.n}, nnz={self.nnz})"


def as_dense(g) -> np.ndarray:
    """Validate a dense gradient: 1-d, nonempty, finite."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.size < 1:
        raise InvalidArgument("dense gradient must be a nonempty 1-d vector")
    if not np.all(np.isfinite(g)):
        raise InvalidArgument("dense gradient has non-finite entries")
    return g


def kth_largest_abs(values, k: int) -> float:
    mags = np.abs(np.asarray(values, dtype=np.float64))
    return float(np.partition(mags, mags.size - k)[mags.size - k])


def _topk_positions(values: np.ndarray, k: int) -> tuple[np.ndarray, float]:
    # ties on |value| resolved toward the smaller position
    mags = np.abs(values)
    th = float(np.partition(mags, mags.size - k)[mags.size - k])
    above = np.flatnonzero(mags > th)
    ties = np.flatnonzero(mags == th)[: k - above.size]
    return np.union1d(above, ties), th


def topk_exact(g, k: int) -> tuple[SparseGrad, float]:
    """Exactly ``k`` largest-magnitude components and the k-th magnitude."""
    g = as_dense(g)
    if not 1 <= k <= g.size:
        raise InvalidArgument(f"k={k} outside [1, {g.size}]")
    pos, th = _topk_positions(g, k)
    return SparseGrad(g.size, pos, g[pos]), th


def topk_sparse(s: SparseGrad, k: int) -> SparseGrad:
    """Top-k of the stored entries of ``s``; all of them when nnz <= k."""
    if k < 1:
        raise InvalidArgument("k must be positive")
    if s.nnz <= k:
        return s
    pos, _ = _topk_positions(s.values, k)
    return SparseGrad(s.n, s.indices[pos], s.values[pos])


def select_by_threshold(g, th: float) -> SparseGrad:
    """All components with ``|value| >= th``. Accepts dense or sparse input."""
    if th < 0 or not np.isfinite(th):
        raise InvalidArgument(f"threshold must be finite and >= 0, got {th}")
    if isinstance(g, SparseGrad):
        pos = kernels.select_abs_ge(g.values, th)
        return SparseGrad(g.n, g.indices[pos], g.values[pos])
    g = np.asarray(g, dtype=np.float64)
    pos = kernels.select_abs_ge(g, th)
    return SparseGrad(g.size, pos, g[pos])


def gaussian_threshold(g, k: int) -> float:
    """Cutoff from a normal fit to ``g``, aiming at ``k`` two-tailed exceedances."""
    g = as_dense(g)
    n = g.size
    if n < 2 or not 1 <= k <= n:
        raise InvalidArgument(f"need n >= 2 and 1 <= k <= n (n={n}, k={k})")
    mu = float(g.mean())
    sigma = float(g.std())
    if sigma == 0.0:
        raise DegenerateDistribution("standard deviation is zero")
    z = NormalDist().inv_cdf(1.0 - k / (2.0 * n))
    return max(mu + sigma * z, 0.0)


def _merge(a: SparseGrad, b: SparseGrad) -> SparseGrad:
    idx, val = kernels.merge_add(a.indices, a.values, b.indices, b.values)
    return SparseGrad(a.n, idx, val)


def sparse_sum(parts: Sequence[SparseGrad], n: int | None = None) -> SparseGrad:
    """Index-wise sum of sparse vectors.

    Parts are combined by a balanced binary tree over their list order, so the
    floating-point result depends only on that order. Recursive-halving dense
    reductions over ranks use the same tree shape.
    """
    parts = list(parts)
    if not parts:
        if n is None:
            raise InvalidArgument("empty sum needs an explicit n")
        return SparseGrad.empty(n)
    n = parts[0].n if n is None else n
    if any(p.n != n for p in parts):
        raise InvalidArgument("parts disagree on n")

    def tree(lo, hi):
        if hi - lo == 1:
            return parts[lo]
        mid = (lo + hi) // 2
        return _merge(tree(lo, mid), tree(mid, hi))

    return tree(0, len(parts))


HEADER_WORDS = 1


def payload_words(s: SparseGrad) -> int:
    return 2 * s.nnz


def wire_encode(s: SparseGrad) -> bytes:
    """``[nnz:u32][indices:u32 * nnz][values:f32 * nnz]``, little-endian."""
    if s.nnz and s.indices[-1] > 0xFFFFFFFF:
        raise WireFormatError("index does not fit in 32 bits")
    return (
        struct.pack("<I", s.nnz)
        + s.indices.astype("<u4").tobytes()
        + s.values.astype("<f4").tobytes()
    )


def wire_decode(buf: bytes, n: int) -> SparseGrad:
    if len(buf) < 4:
        raise WireFormatError("buffer shorter than header")
    (nnz,) = struct.unpack_from("<I", buf)
    if len(buf) != 4 + 8 * nnz:
        raise WireFormatError(f"expected {4 + 8 * nnz} bytes for nnz={nnz}, got {len(buf)}")
    idx = np.frombuffer(buf, dtype="<u4", count=nnz, offset=4).astype(np.int64)
    val = np.frombuffer(buf, dtype="<f4", count=nnz, offset=4 + 4 * nnz).astype(np.float64)
    try:
        return SparseGrad(n, idx, val)
    except InvalidArgument as exc:
        raise WireFormatError(str(exc)) from exc
