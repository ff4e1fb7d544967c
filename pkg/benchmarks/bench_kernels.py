"""Time the compiled kernels against the numpy fallback on a training-sized batch.

Usage: python benchmarks/bench_kernels.py [--batch 16] [--repeat 5]
"""

import argparse
import time

import numpy as np

from umark import _core_py

try:
    from umark import _core
except ImportError:  # extension not built
    _core = None


def _best(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def cases(batch):
    rng = np.random.default_rng(0)
    shapes = [("conv1", 1, 8, 64), ("conv2", 8, 16, 32), ("conv3", 24, 8, 64)]
    for name, cin, cout, size in shapes:
        x = rng.standard_normal((batch, cin, size, size))
        w = rng.standard_normal((cout, cin, 3, 3)) * 0.1
        b = rng.standard_normal(cout)
        g = rng.standard_normal((batch, cout, size, size))
        yield f"{name} fwd", lambda m, x=x, w=w, b=b: m.conv3x3_forward(x, w, b)
        yield f"{name} bwd", lambda m, x=x, w=w, g=g: m.conv3x3_backward(x, w, g)
    x = rng.standard_normal((batch, 8, 64, 64))
    yield "maxpool fwd", lambda m, x=x: m.maxpool2_forward(x)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = [("python", _core_py)] + ([("cython", _core)] if _core is not None else [])
    print(f"{'kernel':<14}" + "".join(f"{n:>12}" for n, _ in backends) + ("   speedup" if _core else ""))
    for name, fn in cases(args.batch):
        times = [_best(lambda m=m: fn(m), args.repeat) for _, m in backends]
        row = f"{name:<14}" + "".join(f"{t * 1e3:>10.2f}ms" for t in times)
        if len(times) == 2:
            row += f"   {times[0] / times[1]:6.1f}x"
        print(row)


if __name__ == "__main__":
    main()
