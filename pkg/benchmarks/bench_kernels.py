"""Time the numba kernels against their numpy fallbacks.

Usage::

    python benchmarks/bench_kernels.py [--repeat 3] [--csv results.csv]

Each kernel runs once per backend to warm up (numba compiles on first
call), then ``--repeat`` timed runs; the best time is reported together with
the largest difference between the two backends' outputs, relative to the\nlargest numpy output.
"""

import argparse
import csv
import sys
import time

import numpy as np

from shehit import _backend, kernels


def _cases():
    gen = np.random.default_rng(0)

    nt, modes = 4096, 256
    decay = np.exp(-gen.uniform(0, 0.5, (nt, modes)))
    scale = gen.uniform(0.1, 1.0, (nt, modes))
    xi = gen.standard_normal((modes, nt + 1))
    a0 = xi[:, 0].copy()
    yield "ou_recursion 4096x256", lambda: kernels.ou_recursion(a0, decay, scale, xi, 1)

    pts = gen.uniform(0, 1, (1500, 2))
    w = gen.dirichlet(np.ones(1500))
    yield "offdiag_energy n=1500", lambda: kernels.offdiag_energy(pts, w, 0.5, np.e * 3, True)

    n = 300
    x = (np.arange(n) + 0.5) / n
    gap = np.abs(x[:, None] - x[None, :])
    np.fill_diagonal(gap, 1.0)
    K = gap ** -0.5
    np.fill_diagonal(K, 4.0 * n ** 0.5)
    yield "frank_wolfe n=300", lambda: kernels.frank_wolfe(K, np.full(n, 1.0 / n), 1e-8, 20_000)[0]

    m = 1500
    tt = gen.uniform(0.5, 1.0, m)
    xx = gen.uniform(0.0, 1.0, m)
    vals = gen.standard_normal(m)
    mass = np.full(m, 1.0 / m)
    yield "garsia_sum n=1500", lambda: kernels.garsia_sum(vals, tt, xx, mass, 8.0, 6.0 + 0.4)


def _time(fn, repeat):
    fn()
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    if not _backend.HAVE_NUMBA:
        print("numba is not installed; nothing to compare", file=sys.stderr)
        return 1
    rows = []
    for name, fn in _cases():
        res = {}
        for b in ("numpy", "numba"):
            _backend.set_backend(b)
            res[b] = _time(fn, args.repeat)
        _backend.set_backend("numba")
        a, c = (np.asarray(res[b][1], dtype=float) for b in ("numpy", "numba"))
        diff = float(np.max(np.abs(a - c)) / max(np.max(np.abs(a)), 1e-300))
        rows.append([name, res["numpy"][0], res["numba"][0], res["numpy"][0] / res["numba"][0], diff])
    print(f"{'kernel':26s} {'numpy s':>10s} {'numba s':>10s} {'speedup':>8s} {'max rel diff':>12s}")
    for r in rows:
        print(f"{r[0]:26s} {r[1]:10.4f} {r[2]:10.4f} {r[3]:8.1f} {r[4]:12.3g}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["kernel", "numpy_seconds", "numba_seconds", "speedup", "max_rel_diff"])
            wr.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
