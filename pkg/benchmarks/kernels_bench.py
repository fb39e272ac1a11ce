#!/usr/bin/env python3
"""Benchmark the compiled kernels against the pure-NumPy fallback.

Run after installing the package:

    python3 benchmarks/kernels_bench.py
"""

import time

import numpy as np

from hiddenwave._kernels import BACKEND, _ref
from hiddenwave import _kernels


def bench(fn, reps):
    fn()
    t0 = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - t0) / reps * 1e6


def main():
    rng = np.random.default_rng(0)
    x = rng.uniform(-50, 50, 262144)
    field = rng.standard_normal((260, 400))
    kern = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])

    cases = [
        ("sin 256k", lambda: _kernels.sin_arr(x), lambda: _ref.sin_arr(x), 50),
        ("cos 256k", lambda: _kernels.cos_arr(x), lambda: _ref.cos_arr(x), 50),
        ("corr3x3 260x400",
         lambda: _kernels.correlate3x3_valid(field, kern),
         lambda: _ref.correlate3x3_valid(field, kern), 200),
    ]

    print(f"active backend: {BACKEND}")
    print(f"{'kernel':<18} {'active us':>10} {'numpy us':>10} {'speedup':>8}")
    for name, fast, ref, reps in cases:
        t_fast = bench(fast, reps)
        t_ref = bench(ref, max(5, reps // 10))
        print(f"{name:<18} {t_fast:>10.1f} {t_ref:>10.1f} {t_ref / t_fast:>7.1f}x")

    # end-to-end flavor: one sine-net forward+backward step
    from hiddenwave import autodiff as adiff
    from hiddenwave.fields import SirenNet

    net = SirenNet(3, [64, 64, 64], seed=0)
    coords = rng.uniform(-1, 1, (2048, 3))
    params = [t for _, t in net.params()]

    def train_step():
        with adiff.finite_checks(False):
            out = net.apply(adiff.Tensor(coords))
            loss = adiff.mean(adiff.square(out))
            adiff.grad(loss, params)

    print(f"{'siren fwd+bwd 2048':<18} {bench(train_step, 20):>10.1f}")


if __name__ == "__main__":
    main()
