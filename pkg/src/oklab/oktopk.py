"""O(k) sparse allreduce: balanced split-and-reduce, then balance-and-allgatherv.

Local and global top-k thresholds are recomputed exactly every ``tau_prime``
iterations and reused in between; region boundaries every ``tau`` iterations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .sparse import SparseGrad, as_dense, kth_largest_abs, select_by_threshold, sparse_sum
from .transport import allgather_blocks, small_allreduce_avg

DEFAULT_TAU = 64
DEFAULT_TAU_PRIME = 32
DEFAULT_BUCKET = 4
BALANCE_TRIGGER = 4.0  # rebalance when max buffer reaches 4x mean
BETA_PHASES = ("split", "balance", "allgatherv")


@dataclass
class ThresholdState:
    tau: int = DEFAULT_TAU
    tau_prime: int = DEFAULT_TAU_PRIME
    local_th: float | None = None
    global_th: float | None = None
    last_eval_iter: int | None = None


@dataclass
class OkState:
    """Per-rank state carried across iterations."""

    thresholds: ThresholdState = field(default_factory=ThresholdState)
    boundaries: np.ndarray | None = None
    bucket_size: int = DEFAULT_BUCKET
    last_boundary_iter: int | None = None
    # diagnostics of the latest call
    local_selected: int = 0
    global_selected: int = 0
    refreshed_thresholds: bool = False
    refreshed_boundaries: bool = False
    balanced: bool = False

    @classmethod
    def create(cls, tau=DEFAULT_TAU, tau_prime=DEFAULT_TAU_PRIME, bucket_size=DEFAULT_BUCKET):
        if tau < 1 or tau_prime < 1 or bucket_size < 1:
            raise InvalidArgument("tau, tau_prime and bucket_size must be positive")
        return cls(ThresholdState(tau, tau_prime), bucket_size=bucket_size)


def th_re_evaluate(g, k: int) -> float:
    """Exact k-th largest magnitude; for sparse input with nnz < k, the smallest one."""
    if k < 1:
        raise InvalidArgument("k must be positive")
    vals = g.values if isinstance(g, SparseGrad) else np.asarray(g, dtype=np.float64)
    if vals.size == 0:
        raise InvalidArgument("cannot evaluate a threshold on empty input")
    if vals.size < k:
        if not isinstance(g, SparseGrad):
            raise InvalidArgument(f"k={k} exceeds n={vals.size}")
        return float(np.abs(vals).min())
    return kth_largest_abs(vals, k)


def local_cuts(selected: np.ndarray, n: int, P: int) -> np.ndarray:
    """Cut points giving each region floor or ceil of m/P selected coordinates.

    Region r starts at its first selected coordinate; with nothing selected
    the regions are equal width.
    """
    m = selected.size
    if m == 0:
        return np.array([(r * n) // P for r in range(P + 1)], dtype=np.float64)
    base, extra = divmod(m, P)
    cuts = np.empty(P + 1, dtype=np.float64)
    cuts[0], cuts[P] = 0, n
    for r in range(1, P):
        c = r * base + min(r, extra)
        cuts[r] = selected[c] if c < m else n
    return cuts


def space_repartition(ctx, g, local_th) -> np.ndarray:
    """Locally balanced cuts, averaged over ranks, rounded and made monotone."""
    g = as_dense(g)
    n, P = g.size, ctx.size
    sel = select_by_threshold(g, local_th)
    avg = small_allreduce_avg(ctx, local_cuts(sel.indices, n, P))
    cuts = np.floor(avg + 0.5).astype(np.int64)
    cuts[0], cuts[P] = 0, n
    cuts = np.minimum(np.maximum.accumulate(cuts), n)
    return cuts


def rotation_schedule(rank, P, bucket_size):
    """Buckets of (destination, source) pairs; step s pairs rank with rank +/- s."""
    steps = list(range(1, P))
    b = max(1, min(bucket_size, max(P - 1, 1)))
    return [[((rank + s) % P, (rank - s) % P) for s in steps[i:i + b]] for i in range(0, P - 1, b)]


def split_and_reduce(ctx, g, local_th, boundaries, bucket_size=DEFAULT_BUCKET):
    """Send each region's slice of the local selection to its owner and reduce.

    Returns this rank's reduced region and the indexes of its local selection.
    """
    g = as_dense(g)
    P, me = ctx.size, ctx.rank
    sel = select_by_threshold(g, local_th)
    pos = np.searchsorted(sel.indices, boundaries)
    slices = [(sel.indices[pos[r]:pos[r + 1]], sel.values[pos[r]:pos[r + 1]]) for r in range(P)]
    got = {me: slices[me]}
    for bucket in rotation_schedule(me, P, bucket_size):
        # issue the whole bucket before draining it
        for dst, _ in bucket:
            ctx.send(dst, "split", *slices[dst])
        for _, src in bucket:
            got[src] = tuple(ctx.recv(src, "split"))
    region = sparse_sum([SparseGrad(g.size, *got[r]) for r in range(P)])
    return region, sel.indices


def balance_plan(sizes, src):
    """Chunks (dst, lo, hi) that rank ``src`` ships so buffers become even.

    Offsets are positions in the rank-ordered concatenation of all buffers.
    Destination r receives the r-th contiguous share of that concatenation.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    P = sizes.size
    T = int(sizes.sum())
    starts = np.concatenate([[0], np.cumsum(sizes)])
    share = np.array([T // P + (r < T % P) for r in range(P)], dtype=np.int64)
    tstarts = np.concatenate([[0], np.cumsum(share)])
    a0, a1 = starts[src], starts[src + 1]
    plan = []
    for r in range(P):
        lo, hi = max(a0, tstarts[r]), min(a1, tstarts[r + 1])
        if hi > lo:
            plan.append((r, int(lo - a0), int(hi - a0)))
    return plan


def balance_and_allgatherv(ctx, region_reduced: SparseGrad, global_th):
    """Select by the global threshold, even out buffer sizes if skewed, allgatherv.

    Returns the global sparse result ``u`` (identical on all ranks), its index
    set and whether rebalancing ran.
    """
    P, me, n = ctx.size, ctx.rank, region_reduced.n
    sel = select_by_threshold(region_reduced, global_th)
    sizes = np.array([b[0][0] for b in allgather_blocks(ctx, (np.array([sel.nnz]),), "consensus")])
    idx, vals = sel.indices, sel.values
    balanced = False
    if P > 1 and sizes.sum() > 0 and sizes.max() >= BALANCE_TRIGGER * sizes.mean():
        balanced = True
        pieces = {}
        for dst, lo, hi in balance_plan(sizes, me):
            if dst == me:
                pieces[me] = (idx[lo:hi], vals[lo:hi])
            else:
                ctx.send(dst, "balance", idx[lo:hi], vals[lo:hi])
        for src in range(P):
            if src != me and any(d == me for d, _, _ in balance_plan(sizes, src)):
                pieces[src] = tuple(ctx.recv(src, "balance"))
        order = sorted(pieces)
        idx = np.concatenate([pieces[r][0] for r in order]) if order else idx[:0]
        vals = np.concatenate([pieces[r][1] for r in order]) if order else vals[:0]
    blocks = allgather_blocks(ctx, (idx, vals), "allgatherv")
    u = SparseGrad(n, np.concatenate([b[0] for b in blocks]), np.concatenate([b[1] for b in blocks]))
    return u, u.indices, balanced


def ok_sparse_allreduce(ctx, state: OkState, g, t: int, k: int):
    """One O(k) sparse allreduce at iteration ``t`` (1-based).

    Returns ``(u, indexes)``: the global sparse sum and the local indexes that
    contributed to it. Diagnostics of the call are left on ``state``.
    """
    if t < 1:
        raise InvalidArgument("iterations are numbered from 1")
    g = as_dense(g)
    th = state.thresholds
    refresh_th = (t - 1) % th.tau_prime == 0 or th.local_th is None
    refresh_cuts = (t - 1) % th.tau == 0 or state.boundaries is None

    if refresh_th:
        th.local_th = th_re_evaluate(g, k)
    if refresh_cuts:
        state.boundaries = space_repartition(ctx, g, th.local_th)
        state.last_boundary_iter = t
    region, local_idx = split_and_reduce(ctx, g, th.local_th, state.boundaries, state.bucket_size)
    if refresh_th:
        blocks = allgather_blocks(ctx, (region.indices, region.values), "gather")
        everything = SparseGrad(g.size, np.concatenate([b[0] for b in blocks]),
                                np.concatenate([b[1] for b in blocks]))
        # an empty global candidate set keeps the previous global threshold
        if everything.nnz:
            th.global_th = th_re_evaluate(everything, k)
        elif th.global_th is None:
            th.global_th = 0.0
        th.last_eval_iter = t
    u, global_idx, balanced = balance_and_allgatherv(ctx, region, th.global_th)

    state.local_selected = int(local_idx.size)
    state.global_selected = u.nnz
    state.refreshed_thresholds = refresh_th
    state.refreshed_boundaries = refresh_cuts
    state.balanced = balanced
    return u, np.intersect1d(local_idx, global_idx, assume_unique=True)
