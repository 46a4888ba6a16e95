"""Numba vs pure-numpy timings for the hot kernels.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is warmed up
once (so JIT compilation is excluded) and then timed as the best of several
repeats.
"""

import argparse
import json
import timeit

import numpy as np

from specface import kernels
from specface.mesh import icosphere


def cases(scale: int):
    mesh = icosphere(4 if scale > 1 else 3)
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4800 * scale, 64))
    y = np.tanh(x) + 0.1 * rng.standard_normal(x.shape)
    return {
        "splitmix64": ((12345, 200_000 * scale), kernels.splitmix64_numba, kernels.splitmix64_numpy),
        "face_geometry": ((mesh.vertices, mesh.faces), kernels.face_geometry_numba, kernels.face_geometry_numpy),
        "column_hist": ((x, 32), kernels.column_hist_numba, kernels.column_hist_numpy),
        "joint_hist": ((x, y, 32), kernels.joint_hist_numba, kernels.joint_hist_numpy),
    }


def best_of(fn, args, repeat: int) -> float:
    fn(*args)
    return min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=int, default=1)
    ap.add_argument("--json", action="store_true")
    args = ap.parse_args()
    rows = []
    for name, (inputs, fast, slow) in cases(args.scale).items():
        t_nb = best_of(fast, inputs, args.repeat)
        t_np = best_of(slow, inputs, args.repeat)
        rows.append({"kernel": name, "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb})
    if args.json:
        print(json.dumps(rows, indent=2))
        return
    print(f"numba active by default: {kernels.USE_NUMBA}")
    print(f"{'kernel':<15s}{'numba ms':>12s}{'numpy ms':>12s}{'speedup':>10s}")
    for r in rows:
        print(f"{r['kernel']:<15s}{r['numba_s'] * 1e3:12.3f}{r['numpy_s'] * 1e3:12.3f}{r['speedup']:10.2f}")


if __name__ == "__main__":
    main()
