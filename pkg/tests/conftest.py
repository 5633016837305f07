import numpy as np
import pytest

from oklab.sparse import SparseGrad
from oklab.transport import InProcTransport, TrafficLedger, run_workers


def run_collective(P, fn, jitter_seed=None, transport=None):
    """Run ``fn(ctx)`` on P in-process ranks; return (results, ledger)."""
    ledger = TrafficLedger()
    if transport is None:
        transport = InProcTransport(P, jitter_seed=jitter_seed, timeout=30)
    return run_workers(P, fn, transport=transport, ledger=ledger), ledger


def sort_topk(g, k):
    """Brute-force oracle: full lexicographic sort by (-|v|, index)."""
    g = np.asarray(g, dtype=np.float64)
    order = np.lexsort((np.arange(g.size), -np.abs(g)))
    pos = np.sort(order[:k])
    return SparseGrad(g.size, pos, g[pos])


def tree_dense_sum(arrays):
    """Balanced pairwise sum in list order, done densely."""
    if len(arrays) == 1:
        return np.array(arrays[0], dtype=np.float64)
    mid = len(arrays) // 2
    return tree_dense_sum(arrays[:mid]) + tree_dense_sum(arrays[mid:])


def random_sparse(rng, n, nnz):
    idx = np.sort(rng.choice(n, nnz, replace=False))
    return SparseGrad(n, idx, rng.standard_normal(nnz))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, printed as one line per criterion after the run
ACCEPTANCE = {}


def record_criterion(num, passed, detail):
    line = f"criterion {num:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[num] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for num in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[num])
