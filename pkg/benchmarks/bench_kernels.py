"""Time the compiled kernels against the numpy fallback on identical inputs.

    python benchmarks/bench_kernels.py [--repeats 7] [--csv out.csv]

Each row reports the median seconds per call for both backends, the speedup
and the largest absolute difference between their results.
"""
import argparse
import statistics
import sys
import time

import numpy as np

from maskdiff import _pykernels, kernels
from maskdiff.core import RngStream


def median_seconds(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def random_table(rng, shape):
    p = rng.random(shape)
    return p / p.sum()


def cases(rng):
    """(name, args) for each kernel at a size typical of the oracles and decoders."""
    v = 3
    init = np.full(v, 1.0 / v)
    trans = 0.8 * np.eye(v) + 0.1 * (1 - np.eye(v))
    emit = 0.9 * np.eye(v) + 0.05 * (1 - np.eye(v))
    probs = rng.random((256, 64))
    probs /= probs.sum(axis=1, keepdims=True)
    return [
        ("cond_mi 27x3x729", "cond_mi", (random_table(rng, (27, 3, 729)), 1e-15)),
        ("expected_kl 27x3x729", "expected_kl", (random_table(rng, (27, 3, 729)), 1e-15)),
        ("chain_joint V=3 n=10", "chain_joint", (init, trans, emit, 10)),
        ("monotone_path 128x32", "monotone_path", (np.log(rng.random((128, 32))),)),
        ("top_p_rows 256x64", "top_p_rows", (probs, 0.586, rng.random(256))),
    ]


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(abs(x - y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--csv", help="also write the table as CSV")
    args = ap.parse_args(argv)
    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the numpy fallback can be timed", file=sys.stderr)
    rng = RngStream(2024).gen
    rows = []
    for label, name, fargs in cases(rng):
        py = getattr(_pykernels, name)
        fast = getattr(kernels, name)
        t_py = median_seconds(lambda: py(*fargs), args.repeats)
        t_fast = median_seconds(lambda: fast(*fargs), args.repeats)
        rows.append({"kernel": label, "backend": kernels.BACKEND, "python_s": t_py, "compiled_s": t_fast,
                     "speedup": t_py / t_fast, "max_abs_diff": max_diff(py(*fargs), fast(*fargs))})
    print(f"{'kernel':24s} {'numpy':>12s} {kernels.BACKEND:>12s} {'speedup':>8s} {'max|diff|':>10s}")
    for r in rows:
        print(f"{r['kernel']:24s} {r['python_s'] * 1e3:10.3f}ms {r['compiled_s'] * 1e3:10.3f}ms "
              f"{r['speedup']:8.1f} {r['max_abs_diff']:10.2e}")
    if args.csv:
        from maskdiff.reporting import emit_csv
        emit_csv(rows, args.csv, kind="kernel_benchmark", note="median seconds per call")
    return 0


if __name__ == "__main__":
    sys.exit(main())
