#!/usr/bin/env python3
"""Timing comparison of the compiled kernels against the numpy fallback.

Runs the three hot kernels on representative shapes, checks that both
backends agree, and prints best-of-N wall times with the native speedup.
Still useful when the extension is not built: it then reports fallback
timings only.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import importlib
import time

import numpy as np

from protoscope.kernels import fallback


def load_native():
    try:
        return importlib.import_module("protoscope.kernels._native")
    except ImportError:
        return None


def build_cases(rng):
    features = rng.standard_normal((28, 28, 96))
    prototypes = rng.standard_normal((192, 96))
    coarse = rng.uniform(0.0, 9.0, size=(7, 7))
    plane = rng.uniform(0.0, 1.0, size=(224, 224))
    return [
        ("similarity_maps  (28,28,96) x 192", "similarity_maps", (features, prototypes, 1e-4)),
        ("bicubic_upscale  7x7 -> 224x224", "bicubic_upscale", (coarse, 224, 224)),
        ("box_blur3        224x224, k=3", "box_blur3", (plane, 3)),
    ]


def best_of(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - start)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7, help="best-of repeat count")
    args = parser.parse_args()

    native = load_native()
    cases = build_cases(np.random.default_rng(0))

    if native is None:
        print("compiled extension not built; timing the numpy fallback only\n")
        print(f"{'kernel':<36}{'python':>12}")
        for name, attr, call_args in cases:
            py = best_of(getattr(fallback, attr), call_args, args.repeats)
            print(f"{name:<36}{py * 1e3:>10.2f}ms")
        return

    print(f"{'kernel':<36}{'python':>12}{'native':>12}{'speedup':>10}{'max |diff|':>12}")
    for name, attr, call_args in cases:
        py_fn = getattr(fallback, attr)
        nat_fn = getattr(native, attr)
        diff = float(np.max(np.abs(np.asarray(py_fn(*call_args)) - np.asarray(nat_fn(*call_args)))))
        py = best_of(py_fn, call_args, args.repeats)
        nat = best_of(nat_fn, call_args, args.repeats)
        print(f"{name:<36}{py * 1e3:>10.2f}ms{nat * 1e3:>10.2f}ms{py / nat:>9.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
