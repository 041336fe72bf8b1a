"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Workloads mirror the tracker: 8-point patterns for a few thousand points on a
848x480 image, plus pyramid construction.
"""
import argparse
import timeit

import numpy as np

from ceilvo._kernels import _pykernels

try:
    from ceilvo._kernels import _ckernels
except ImportError:
    _ckernels = None


def workloads(rng):
    img = rng.uniform(0, 255, (480, 848))
    n = 2000 * 8
    u = rng.uniform(-2, 850, n)
    v = rng.uniform(-2, 482, n)
    return {
        "bilinear 16k": lambda m: m.bilinear(img, u, v),
        "downsample2 848x480": lambda m: m.downsample2(img),
        "central_gradient 848x480": lambda m: m.central_gradient(img),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    impls = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled kernels not built; timing the fallback only")
    print(f"{'kernel':28s}" + "".join(f"{n:>12s}" for n, _ in impls) + ("     speedup" if _ckernels else ""))
    for name, fn in workloads(rng).items():
        ms = []
        for _, mod in impls:
            fn(mod)
            t = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat))
            ms.append(1000 * t)
        row = f"{name:28s}" + "".join(f"{x:10.3f}ms" for x in ms)
        if len(ms) == 2:
            row += f"{ms[0] / ms[1]:11.1f}x"
        print(row)


if __name__ == "__main__":
    main()
