"""Compare the compiled kernels with the NumPy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Prints the best-of-``repeat`` wall time of each kernel on both backends and
the speedup; results are checked for agreement before timing.
"""
import argparse
import json
import time

import numpy as np

from tbngranger import kernels


def best_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases():
    rng = np.random.default_rng(0)
    x0 = 10 + rng.normal(0, 0.01, 40)
    coefs = rng.normal(size=(2, 20, 20)) * 0.05
    init = rng.normal(size=(2, 20))
    noise = rng.normal(size=(20_000, 20))
    A1 = rng.normal(size=(1, 20, 20)) * 0.2
    A10 = rng.normal(size=(64, 10, 10)) * 0.3
    A50 = rng.normal(size=(8, 50, 50)) * 0.1
    P, X = rng.random((64, 20, 20)), rng.normal(size=(64, 20, 16))
    return {
        "lorenz96_rk4 P=40 T=2000x10": lambda k: k.lorenz96_rk4(x0, 10.0, 0.01, 2000, 10, 1e6),
        "var_simulate N=20 lag=2 T=20000": lambda k: k.var_simulate(coefs, init, noise),
        "acyclicity_batch 1x20x20": lambda k: k.acyclicity_batch(A1, 10.0),
        "acyclicity_batch 64x10x10": lambda k: k.acyclicity_batch(A10, 10.0),
        "acyclicity_batch 8x50x50": lambda k: k.acyclicity_batch(A50, 10.0),
        "canonical_bmm 64x20x20 @ 20x16": lambda k: k.canonical_bmm(P, X),
    }


def _first(out):
    return out[0] if isinstance(out, tuple) else out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json")
    args = ap.parse_args(argv)
    if kernels.c is None:
        print("compiled kernels not built; only the NumPy fallback is available")
    rows = []
    for name, fn in cases().items():
        row = {"kernel": name, "numpy_s": best_time(lambda: fn(kernels.py), args.repeat)}
        if kernels.c is not None:
            np.testing.assert_allclose(_first(fn(kernels.c)), _first(fn(kernels.py)), rtol=1e-9, atol=1e-9)
            row["cython_s"] = best_time(lambda: fn(kernels.c), args.repeat)
            row["speedup"] = row["numpy_s"] / row["cython_s"]
        rows.append(row)
    width = max(len(r["kernel"]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy [ms]':>11}  {'cython [ms]':>11}  {'speedup':>8}")
    for r in rows:
        c = f"{1e3 * r['cython_s']:11.3f}  {r['speedup']:7.1f}x" if "cython_s" in r else f"{'-':>11}  {'-':>8}"
        print(f"{r['kernel']:<{width}}  {1e3 * r['numpy_s']:11.3f}  {c}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return rows


if __name__ == "__main__":
    main()
