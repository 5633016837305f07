"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--sizes 1000 100000] [--repeat 5]

Prints best-of-repeat wall time per call for both backends and checks that
their outputs agree bit for bit.
"""

import argparse
import timeit

import numpy as np

from oklab import _kernels_py

try:
    from oklab import _kernels as _kernels_c
except ImportError:  # built with OKLAB_NO_EXT or without Cython
    _kernels_c = None


def make_inputs(n, density, seed=0):
    rng = np.random.default_rng(seed)
    nnz = max(1, int(n * density))
    ia = np.sort(rng.choice(n, nnz, replace=False)).astype(np.int64)
    ib = np.sort(rng.choice(n, nnz, replace=False)).astype(np.int64)
    return ia, rng.standard_normal(nnz), ib, rng.standard_normal(nnz), rng.standard_normal(n)


def best(fn, repeat):
    timer = timeit.Timer(fn)
    number, _ = timer.autorange()
    return min(timer.repeat(repeat, number)) / number


def same(x, y):
    return all(np.asarray(a).tobytes() == np.asarray(b).tobytes() for a, b in zip(x, y))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[10**4, 10**5, 10**6])
    ap.add_argument("--density", type=float, default=0.01)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    backends = [("numpy", _kernels_py)]
    if _kernels_c is not None:
        backends.insert(0, ("cython", _kernels_c))
    else:
        print("compiled backend not built; timing the numpy fallback only")

    print(f"{'kernel':<14}{'n':>10}  " + "".join(f"{name:>12}" for name, _ in backends) + "   speedup  bitwise")
    for n in args.sizes:
        ia, va, ib, vb, dense = make_inputs(n, args.density)
        th = float(np.quantile(np.abs(dense), 1 - args.density))
        cases = {
            "merge_add": lambda m: m.merge_add(ia, va, ib, vb),
            "select_abs_ge": lambda m: (m.select_abs_ge(dense, th),),
        }
        for kernel, call in cases.items():
            times = [best(lambda m=m: call(m), args.repeat) for _, m in backends]
            outs = [call(m) for _, m in backends]
            match = all(same(outs[0], o) for o in outs[1:])
            speed = f"{times[-1] / times[0]:8.1f}x" if len(times) > 1 else "       -"
            cols = "".join(f"{t * 1e6:10.1f}us" for t in times)
            print(f"{kernel:<14}{n:>10}  {cols}  {speed}  {'yes' if match else 'NO'}")


if __name__ == "__main__":
    main()
