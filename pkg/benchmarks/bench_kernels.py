"""Compare the compiled and numpy convolution kernels.

    python3 benchmarks/bench_kernels.py [--T 8000] [--repeat 5]

Times conv1d forward and backward at the shapes of the desk-scale model
(F=32, k=7) and of the full model (F=64), and checks both backends agree.
"""

import argparse
import time

import numpy as np

from colontcn import _backend, seqcore
from colontcn.seqcore import ConvParams


def timed(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=8000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = _backend.available()
    simd = _backend.get("compiled").SIMD if "compiled" in backends else "-"
    print(f"backends: {backends}  compiled SIMD path: {simd}")
    rng = np.random.default_rng(0)
    cases = [(32, 7, 1), (32, 7, 16), (64, 7, 64), (64, 1, 1), (16, 1, 1)]
    print(f"{'F':>4} {'k':>2} {'dil':>4} " + " ".join(f"{b + ' fwd':>13} {b + ' bwd':>13}" for b in backends) + "   max|diff|")
    for F, k, d in cases:
        x = rng.standard_normal((args.T, F))
        p = ConvParams(rng.standard_normal((F, F, k)) * 0.1, rng.standard_normal(F), np.ones(F), d)
        g = rng.standard_normal((args.T, F))
        cols, outs = [], []
        for b in backends:
            _backend.use(b)
            fwd = timed(lambda: seqcore.conv1d_forward(x, p), args.repeat)
            bwd = timed(lambda: seqcore.conv1d_backward(x, p, g), args.repeat)
            outs.append((seqcore.conv1d_forward(x, p), *seqcore.conv1d_backward(x, p, g)[:2]))
            cols.append(f"{fwd * 1e3:10.2f} ms {bwd * 1e3:10.2f} ms")
        diff = 0.0
        for a, b in zip(outs[0], outs[-1]):
            diff = max(diff, float(np.max(np.abs(a - b))))
        print(f"{F:>4} {k:>2} {d:>4} " + " ".join(cols) + f"   {diff:.2e}")


if __name__ == "__main__":
    main()
