"""Time the compiled kernels against the numpy fallback.

Usage::

    python benchmarks/bench_kernels.py [--n 1000] [--repeat 200]

Prints one line per kernel with the median time of each backend and the
speed-up. Without a built extension only the fallback is timed.
"""
import argparse
import statistics
import time

import numpy as np

from cacemi._kernels import _fallback


def _time(fn, repeat):
    out = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t)
    return statistics.median(out)


def cases(n, rng):
    X = np.column_stack([np.ones(n), rng.random(n) < 0.7, rng.standard_normal((n, 2))])
    X[:, 2] = X[:, 1] * (rng.random(n) < 0.5)
    w = np.ones(n)
    beta = np.array([0.0, 1.0, 2.0, 0.5])
    y = (rng.random(n) < 1 / (1 + np.exp(-X @ beta))).astype(float)
    yc = X @ beta + rng.standard_normal(n)
    e0 = rng.standard_normal(n)
    e1 = e0 + 1.5
    pi = np.full(n, 0.7)
    u = rng.random((n, 4, 2))
    start = np.zeros(4)
    return {
        "crossprod": lambda k: k.crossprod(X, w, yc),
        "logistic_loglik": lambda k: k.logistic_loglik(X, y, w, beta),
        "irls_logistic": lambda k: k.irls_logistic(X, y, w, start, 100, 1e-8, 1e-10),
        "class_posterior": lambda k: k.class_posterior(yc, e1, e0, pi, 1.0, False),
        "rejection_round": lambda k: k.rejection_round(yc, e1, e0, pi, 1.0, False, u),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000, help="records per call")
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    try:
        from cacemi._kernels import _core
    except ImportError:
        _core = None
        print("compiled extension not built; timing the fallback only")

    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18}{'python (us)':>14}{'cython (us)':>14}{'speed-up':>10}")
    for name, call in cases(args.n, rng).items():
        tp = _time(lambda: call(_fallback), args.repeat) * 1e6
        if _core is None:
            print(f"{name:<18}{tp:>14.1f}{'-':>14}{'-':>10}")
            continue
        tc = _time(lambda: call(_core), args.repeat) * 1e6
        print(f"{name:<18}{tp:>14.1f}{tc:>14.1f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
