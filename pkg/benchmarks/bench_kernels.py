"""Compiled vs numpy patch kernels on descriptor-sized volumes.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints the best-of-N wall time per kernel and backend, plus the speedup.
"""
import argparse
import time

import numpy as np

from vebm import kernels

CASES = [
    # (N, C, spatial, kernel, stride)
    ("conv 16³ k5 s2, 8x1", (8, 1, 16), 5, 2),
    ("conv 8³ k3 s1, 8x16", (8, 16, 8), 3, 1),
    ("conv 32³ k9 s3, 4x1", (4, 1, 32), 9, 3),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = {"python": kernels.using("python")}
    try:
        backends["cython"] = kernels.using("cython")
    except ImportError:
        print("compiled kernels not built; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'kernel':38s} " + " ".join(f"{b:>10s}" for b in backends) + "   speedup")
    for label, (n, c, s), k, st in CASES:
        out = -(-s // st)
        pad = (out - 1) * st + k
        xp = rng.standard_normal((n, c, pad, pad, pad)).astype(np.float32)
        shape = (out,) * 3
        rows = {}
        for b, impl in backends.items():
            rows[b] = best_of(lambda: impl.im2col3d(xp, (k,) * 3, (st,) * 3, shape), args.repeat)
        _report(f"im2col  {label}", rows)
        cols = backends["python"].im2col3d(xp, (k,) * 3, (st,) * 3, shape)
        rows = {b: best_of(lambda: impl.col2im3d(cols, xp.shape[2:], (st,) * 3), args.repeat) for b, impl in backends.items()}
        _report(f"col2im  {label}", rows)
    x = rng.standard_normal((8, 32, 16, 16, 16)).astype(np.float32)
    rows = {b: best_of(lambda: impl.maxpool3d_forward(x, (2, 2, 2)), args.repeat) for b, impl in backends.items()}
    _report("maxpool 16³ k2, 8x32", rows)


def _report(label, rows):
    cells = " ".join(f"{1e3 * t:9.2f}ms" for t in rows.values())
    speed = f"{rows['python'] / rows['cython']:8.1f}x" if "cython" in rows else ""
    print(f"{label:38s} {cells} {speed}")


if __name__ == "__main__":
    main()
