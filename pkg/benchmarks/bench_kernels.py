"""Time the compiled selective-scan kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Shapes cover the training batch (64 pairs x 33 fields, D=128, S=128) and a
few smaller ones. Outputs are checked for agreement before timing.
"""
import argparse
import json
import sys
import timeit

import numpy as np

from calm import kernels

SHAPES = [(8, 33, 16, 16), (32, 33, 64, 64), (64, 33, 128, 128)]


def inputs(N, J, D, S, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(N, J, D))
    delta = np.logaddexp(0, rng.normal(size=(N, J, D)) - 2)
    A = -np.exp(rng.normal(size=(D, S)))
    B, C = rng.normal(size=(N, J, S)), rng.normal(size=(N, J, S))
    return u, delta, A, B, C, rng.normal(size=(N, J, D))


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    if not kernels.HAVE_COMPILED:
        print("compiled kernels unavailable; only the numpy path would run", file=sys.stderr)
        return 1

    rows = []
    print(f"{'shape (N,J,D,S)':<22}{'pass':<9}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for shape in SHAPES:
        u, delta, A, B, C, gy = inputs(*shape)
        fwd = {b: kernels.scan_forward(u, delta, A, B, C, backend=b) for b in ("numpy", "cython")}
        bwd = {b: kernels.scan_backward(u, delta, A, B, C, gy, backend=b) for b in ("numpy", "cython")}
        assert np.allclose(fwd["numpy"], fwd["cython"], atol=1e-10)
        assert all(np.allclose(a, b, atol=1e-8) for a, b in zip(bwd["numpy"], bwd["cython"]))
        for name, call in (("forward", lambda b: kernels.scan_forward(u, delta, A, B, C, backend=b)),
                           ("backward", lambda b: kernels.scan_backward(u, delta, A, B, C, gy, backend=b))):
            t_np = best_of(lambda: call("numpy"), args.repeat)
            t_cy = best_of(lambda: call("cython"), args.repeat)
            rows.append({"shape": list(shape), "pass": name, "numpy_s": t_np, "cython_s": t_cy,
                         "speedup": t_np / t_cy})
            print(f"{str(shape):<22}{name:<9}{1e3 * t_np:>10.2f}{1e3 * t_cy:>11.2f}{t_np / t_cy:>8.1f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
