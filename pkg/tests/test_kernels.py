import numpy as np
import pytest

from oklab import _kernels_py, kernels

try:
    from oklab import _kernels as _kernels_c
except ImportError:  # extension not built
    _kernels_c = None

BACKENDS = [_kernels_py] + ([_kernels_c] if _kernels_c is not None else [])


def test_dispatch_reports_backend():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.BACKEND)
def test_merge_add_small(impl):
    i, v = impl.merge_add(np.array([0, 6], dtype=np.int64), np.array([5.0, 2.0]),
                          np.array([1, 6], dtype=np.int64), np.array([3.0, -2.0]))
    assert i.tolist() == [0, 1, 6]
    assert v.tolist() == [5.0, 3.0, 0.0]


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.BACKEND)
def test_merge_add_empty(impl):
    e_i, e_v = np.empty(0, dtype=np.int64), np.empty(0)
    i, v = impl.merge_add(e_i, e_v, e_i, e_v)
    assert i.size == 0 and v.size == 0
    i, v = impl.merge_add(np.array([3], dtype=np.int64), np.array([-0.0]), e_i, e_v)
    assert i.tolist() == [3] and np.signbit(v[0]) == np.signbit(0.0 + -0.0)


@pytest.mark.skipif(_kernels_c is None, reason="extension not built")
@pytest.mark.parametrize("seed", range(20))
def test_backends_bitwise_equal(seed):
    rng = np.random.default_rng(seed)
    n = 5000
    a = np.sort(rng.choice(n, rng.integers(0, 800), replace=False)).astype(np.int64)
    b = np.sort(rng.choice(n, rng.integers(0, 800), replace=False)).astype(np.int64)
    va, vb = rng.standard_normal(a.size), rng.standard_normal(b.size)
    ip, vp = _kernels_py.merge_add(a, va, b, vb)
    ic, vc = _kernels_c.merge_add(a, va, b, vb)
    assert np.array_equal(ip, ic)
    assert vp.tobytes() == vc.tobytes()
    g = rng.standard_normal(n)
    assert np.array_equal(_kernels_py.select_abs_ge(g, 1.3), _kernels_c.select_abs_ge(g, 1.3))


def test_benchmark_script_runs():
    import subprocess
    import sys
    from pathlib import Path

    script = Path(__file__).resolve().parents[1] / "benchmarks" / "bench_kernels.py"
    proc = subprocess.run([sys.executable, str(script), "--sizes", "2000", "--repeat", "1"],
                          capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert "NO" not in proc.stdout.split("bitwise", 1)[1]
