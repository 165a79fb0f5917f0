"""Compare the compiled core against the numpy fallback.

Usage: ``python benchmarks/bench_backends.py [--repeat N] [--threads N]``.
Each kernel runs on identical inputs under both backends; the table lists
the best wall time, the speedup and the largest output difference.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from srbridge import _backend
from srbridge.discretization import default_grid, grid_kernel, table_for_grid
from srbridge.heat_kernel import log_unit_integral


def _best(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _diff(a, b):
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    fin = np.isfinite(a) & np.isfinite(b)
    return float(np.max(np.abs(a[fin] - b[fin]))) if fin.any() else 0.0


def cases(threads):
    rng = np.random.default_rng(0)
    A = rng.uniform(0.0, 20.0, 2000)
    B = rng.uniform(0.0, 40.0, 2000)
    grid = default_grid()
    K = grid_kernel(grid, table_for_grid(grid, 0.5, 1.0, 0.25))
    P, nz = K.shape
    # block layout (nz, P)
    g = rng.normal(size=(nz, P))
    f = rng.normal(size=(nz, P))
    rho2 = rng.uniform(0.0, 30.0, 200_000)
    zabs = rng.uniform(0.0, 5.0, 200_000)
    ids = np.arange(1_000_000, dtype=np.uint64)

    def contour(name):
        return lambda: log_unit_integral(A, B, backend=name)

    def call(kernel, *a):
        return lambda name: (lambda: _backend.get(kernel, name)(*a))

    rmax = _backend.get("log_block_max")(K.logK, g, threads) + f
    cmax = _backend.get("log_block_max")(K.logK_T, f, threads) + g
    # a tight cut keeps the support near 1% of N^2 for these random inputs
    rthr, cthr = rmax - 6.0, cmax - 6.0

    yield "contour quadrature (2e3 pts)", contour
    yield "log-domain block matvec", call("log_block_matvec", K.logK, g, threads)
    yield "block row maxima", call("log_block_max", K.logK, g, threads)
    yield "sparse support", call("sparse_support", K.logK, f, g, rthr, cthr, threads)
    yield "distance squared (2e5 pts)", call("dist_sq_block", rho2, zabs, 0.25, threads)
    yield "philox normals (1e6 x 2)", call("philox_normals", 7, ids, 3, 2, threads)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    if _backend.BACKEND != "compiled":
        raise SystemExit("compiled core not built; run 'python setup.py build_ext --inplace'")
    print(f"{'kernel':32s} {'compiled s':>11s} {'python s':>11s} {'speedup':>8s} {'max diff':>10s}")
    for label, make in cases(args.threads):
        tc, oc = _best(make("compiled"), args.repeat)
        tp, op = _best(make("python"), args.repeat)
        print(f"{label:32s} {tc:11.4f} {tp:11.4f} {tp / tc:8.1f} {_diff(oc, op):10.2e}", flush=True)


if __name__ == "__main__":
    main()
