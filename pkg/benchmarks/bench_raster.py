"""Time the compiled and pure-Python disc rasterizers on a vessel-sized workload.

    python3 benchmarks/bench_raster.py [--discs N] [--size H W] [--repeat R]
"""
import argparse
import time

import numpy as np

from angiosynth import raster


def _time(backend, args, repeat):
    best = float("inf")
    for _ in range(repeat):
        canvas = np.zeros(args.size, dtype=np.float64)
        t0 = time.perf_counter()
        raster.stamp_discs(canvas, *args.discs_arrays, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, canvas


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--discs", type=int, default=4000)
    p.add_argument("--size", type=int, nargs=2, default=(608, 768), metavar=("H", "W"))
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    g = np.random.default_rng(args.seed)
    h, w = args.size
    args.discs_arrays = (g.uniform(0, h, args.discs), g.uniform(0, w, args.discs),
                         g.uniform(0.5, 4.0, args.discs), g.uniform(0.3, 1.0, args.discs))

    py_t, py_canvas = _time("python", args, args.repeat)
    print(f"python  {py_t * 1e3:9.1f} ms")
    if raster.BACKEND != "cython":
        print("cython  not built (pip install --no-build-isolation -e .)")
        return
    cy_t, cy_canvas = _time("cython", args, args.repeat)
    print(f"cython  {cy_t * 1e3:9.1f} ms   speed-up {py_t / cy_t:.1f}x")
    print("outputs identical:", bool(np.array_equal(py_canvas, cy_canvas)))


if __name__ == "__main__":
    main()
