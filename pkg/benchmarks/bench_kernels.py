"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]

Shapes follow the default desk-scale network (64 x 160 images, 12 x 50 grid,
16 depth bins, batch 4).
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from grouplane import _kernels_py

try:
    from grouplane import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    x = np.pad(rng.normal(size=(4, 16, 32, 80)), ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = rng.normal(size=(4, 16 * 9, 16 * 40))
    B, C, D, P, n_cells = 4, 64, 16, 40, 600
    ctx = rng.normal(size=(B, C, P))
    probs = rng.dirichlet(np.ones(D), size=(B, P)).transpose(0, 2, 1).copy()
    cells = rng.integers(-1, n_cells, size=(D, P))
    grad = rng.normal(size=(B, C, n_cells))
    small, large = rng.uniform(size=(4, 4)), rng.uniform(size=(50, 50))
    return {
        "im2col 3x3/2 [4,16,34,82]": lambda k: k.im2col(x, 3, 3, 2),
        "col2im 3x3/2 [4,16,34,82]": lambda k: k.col2im(cols, 16, 34, 82, 3, 3, 2),
        "splat_forward B4 C64 D16": lambda k: k.splat_forward(ctx, probs, cells, n_cells),
        "splat_backward B4 C64 D16": lambda k: k.splat_backward(grad, ctx, probs, cells),
        "solve_lap 4x4": lambda k: k.solve_lap(small),
        "solve_lap 50x50": lambda k: k.solve_lap(large),
    }


def best_time(fn, repeat: int) -> float:
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation`",
              file=sys.stderr)
        return 1
    rows = []
    for name, call in cases(np.random.default_rng(0)).items():
        py = best_time(lambda: call(_kernels_py), args.repeat)
        cy = best_time(lambda: call(_ckernels), args.repeat)
        rows.append({"kernel": name, "python_s": py, "cython_s": cy, "speedup": py / cy})
    print(f"{'kernel':32s} {'python':>12s} {'cython':>12s} {'speedup':>8s}")
    for r in rows:
        print(f"{r['kernel']:32s} {r['python_s'] * 1e6:10.1f}us {r['cython_s'] * 1e6:10.1f}us "
              f"{r['speedup']:7.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
