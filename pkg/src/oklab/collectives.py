"""Baseline allreduces: Dense, TopkA, TopkDSA, gTopk, Gaussiank."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import UnsupportedConfiguration
from .sparse import (
    SparseGrad,
    as_dense,
    gaussian_threshold,
    select_by_threshold,
    sparse_sum,
    topk_exact,
    topk_sparse,
)
from .transport import SENT, allgather_blocks, is_pow2

GAUSSIANK_SCALE = 0.9


@dataclass
class AlgoResult:
    accumulated: object  # SparseGrad, or ndarray for dense
    words: dict = field(default_factory=dict)  # phase -> words sent by this rank
    selected: int = 0
    info: dict = field(default_factory=dict)


class _Meter:
    """Words sent by one rank per phase over a block of code."""

    def __init__(self, ctx):
        self.ctx = ctx

    def __enter__(self):
        self.before = self.ctx.ledger.snapshot(self.ctx.rank)
        return self

    def __exit__(self, *exc):
        after = self.ctx.ledger.snapshot(self.ctx.rank)
        self.words = {}
        for (r, phase, d), (w, _) in after.items():
            if d == SENT:
                self.words[phase] = w - self.before.get((r, phase, d), (0, 0))[0]
        return False


def _require_pow2(P, name):
    if not is_pow2(P):
        raise UnsupportedConfiguration(f"{name} needs a power-of-two worker count, got {P}")


def block_edges(n, P):
    return [(b * n) // P for b in range(P + 1)]


def _halving_schedule(rank, P):
    """Block ranges (lo, hi) kept and handed off at each recursive-halving round."""
    lo, hi = 0, P
    rounds = []
    mask = 1
    while mask < P:
        mid = (lo + hi) // 2
        if rank & mask:
            keep, give = (mid, hi), (lo, mid)
        else:
            keep, give = (lo, mid), (mid, hi)
        rounds.append((mask, keep, give))
        lo, hi = keep
        mask <<= 1
    return rounds


def dense_allreduce(ctx, g) -> np.ndarray:
    """Rabenseifner: recursive-halving reduce-scatter, then recursive-doubling allgather.

    Round ``j`` pairs ranks differing in bit ``j``, so every element is summed
    by the balanced tree ((g0+g1)+(g2+g3))... over rank order.
    """
    buf = as_dense(g).copy()
    P, me = ctx.size, ctx.rank
    if P == 1:
        return buf
    _require_pow2(P, "dense allreduce")
    e = block_edges(buf.size, P)
    rounds = _halving_schedule(me, P)
    for mask, keep, give in rounds:
        ctx.send(me ^ mask, "dense", buf[e[give[0]]:e[give[1]]])
        (theirs,) = ctx.recv(me ^ mask, "dense")
        a, b = e[keep[0]], e[keep[1]]
        buf[a:b] = buf[a:b] + theirs
    for mask, keep, give in reversed(rounds):
        ctx.send(me ^ mask, "dense", buf[e[keep[0]]:e[keep[1]]])
        (theirs,) = ctx.recv(me ^ mask, "dense")
        buf[e[give[0]]:e[give[1]]] = theirs
    return buf


def _gather_sum(ctx, s: SparseGrad, tag) -> SparseGrad:
    blocks = allgather_blocks(ctx, (s.indices, s.values), tag)
    return sparse_sum([SparseGrad(s.n, i, v) for i, v in blocks])


def topka_allreduce(ctx, g, k) -> AlgoResult:
    """Allgather every rank's exact top-k, then sum locally."""
    with _Meter(ctx) as m:
        s, _ = topk_exact(g, k)
        out = _gather_sum(ctx, s, "allgatherv") if ctx.size > 1 else s
    return AlgoResult(out, m.words, selected=s.nnz)


def gaussiank_allreduce(ctx, g, k, scale=True, factor=GAUSSIANK_SCALE) -> AlgoResult:
    """Gaussian-fitted threshold selection, then the TopkA transport path.

    With ``scale`` the threshold shrinks by ``factor`` until more than 3k/4
    components pass.
    """
    g = as_dense(g)
    with _Meter(ctx) as m:
        th = gaussian_threshold(g, k)
        s = select_by_threshold(g, th)
        steps = 0
        while scale and s.nnz * 4 <= 3 * k:
            th *= factor
            s = select_by_threshold(g, th)
            steps += 1
        out = _gather_sum(ctx, s, "allgatherv") if ctx.size > 1 else s
    return AlgoResult(out, m.words, selected=s.nnz, info={"threshold": th, "scale_steps": steps})


def gtopk_allreduce(ctx, g, k) -> AlgoResult:
    """Butterfly of pairwise exchange, sum and re-selection of the top k."""
    P, me = ctx.size, ctx.rank
    with _Meter(ctx) as m:
        s, _ = topk_exact(g, k)
        local = s.nnz
        if P > 1:
            _require_pow2(P, "gtopk")
            mask = 1
            while mask < P:
                ctx.send(me ^ mask, "split", s.indices, s.values)
                i, v = ctx.recv(me ^ mask, "split")
                s = topk_sparse(sparse_sum([s, SparseGrad(s.n, i, v)]), k)
                mask <<= 1
    return AlgoResult(s, m.words, selected=local)


class _Segment:
    """TopkDSA working set over [lo, hi): COO until it no longer pays, then dense."""

    def __init__(self, n, lo, hi, sparse=None, dense=None):
        self.n, self.lo, self.hi = n, lo, hi
        self.sparse, self.dense = sparse, dense
        self._maybe_densify()

    def _maybe_densify(self):
        if self.dense is None and 2 * self.sparse.nnz >= self.hi - self.lo > 0:
            d = np.zeros(self.hi - self.lo)
            d[self.sparse.indices - self.lo] = self.sparse.values
            self.dense, self.sparse = d, None

    def part(self, lo, hi):
        if self.dense is not None:
            return _Segment(self.n, lo, hi, dense=self.dense[lo - self.lo:hi - self.lo])
        return _Segment(self.n, lo, hi, sparse=self.sparse.restrict(lo, hi))

    def wire(self):
        # dense blocks travel as (no indices, hi-lo values)
        if self.dense is not None:
            return np.empty(0, dtype=np.int64), self.dense
        return self.sparse.indices, self.sparse.values

    @classmethod
    def from_wire(cls, n, lo, hi, idx, vals):
        if idx.size == 0 and vals.size == hi - lo and vals.size > 0:
            return cls(n, lo, hi, dense=np.asarray(vals, dtype=np.float64))
        return cls(n, lo, hi, sparse=SparseGrad(n, idx, vals))

    def add(self, other):
        if self.dense is None and other.dense is None:
            return _Segment(self.n, self.lo, self.hi, sparse=sparse_sum([self.sparse, other.sparse]))
        d = self._as_dense() + other._as_dense()
        return _Segment(self.n, self.lo, self.hi, dense=d)

    def _as_dense(self):
        if self.dense is not None:
            return self.dense
        d = np.zeros(self.hi - self.lo)
        d[self.sparse.indices - self.lo] = self.sparse.values
        return d

    def to_sparse(self):
        if self.dense is None:
            return self.sparse
        nz = np.flatnonzero(self.dense)
        return SparseGrad(self.n, nz + self.lo, self.dense[nz])


def topkdsa_allreduce(ctx, g, k) -> AlgoResult:
    """Sparse reduce-scatter (recursive halving) plus allgatherv of owned segments.

    A segment switches to dense once its COO form is at least as large as the
    dense one (2*nnz >= length). ``info['density']`` is the output fill-in.
    """
    P, me = ctx.size, ctx.rank
    with _Meter(ctx) as m:
        s, _ = topk_exact(g, k)
        n = s.n
        if P == 1:
            return AlgoResult(s, {}, selected=s.nnz, info={"density": s.nnz / n, "dense_switch": False})
        _require_pow2(P, "topkdsa")
        e = block_edges(n, P)
        seg = _Segment(n, 0, n, sparse=s)
        rounds = _halving_schedule(me, P)
        for mask, keep, give in rounds:
            out = seg.part(e[give[0]], e[give[1]])
            ctx.send(me ^ mask, "split", *out.wire())
            idx, vals = ctx.recv(me ^ mask, "split")
            lo, hi = e[keep[0]], e[keep[1]]
            seg = seg.part(lo, hi).add(_Segment.from_wire(n, lo, hi, idx, vals))
        switched = seg.dense is not None
        blocks = allgather_blocks(ctx, seg.wire(), "allgatherv")
        owned = []
        for r, (idx, vals) in enumerate(blocks):
            b0, b1 = _halving_schedule(r, P)[-1][1]
            owned.append((b0, _Segment.from_wire(n, e[b0], e[b1], idx, vals).to_sparse()))
        segs = [x for _, x in sorted(owned, key=lambda t: t[0])]
        out = SparseGrad(
            n,
            np.concatenate([x.indices for x in segs]),
            np.concatenate([x.values for x in segs]),
        )
    return AlgoResult(out, m.words, selected=s.nnz, info={"density": out.nnz / n, "dense_switch": switched})
