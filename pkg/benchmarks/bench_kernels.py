#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times the raw conv/pool kernels on the shapes the network actually runs,
then a full model forward+backward with each backend swapped in.

    python benchmarks/bench_kernels.py [--repeats 50]
"""

from __future__ import annotations

import argparse
import time
from contextlib import contextmanager

import numpy as np

import dtpn.kernels as kernels
from dtpn.io_formats import PyramidFeature
from dtpn.kernels import _reference
from dtpn.model import ModelConfig, PyramidDetector

try:
    from dtpn.kernels import _speedups
except ImportError:
    _speedups = None


@contextmanager
def backend(impl):
    saved = {
        name: getattr(kernels, name)
        for name in (
            "conv1d_forward",
            "conv1d_backward",
            "maxpool1d_forward",
            "maxpool1d_backward",
        )
    }
    try:
        for name in saved:
            setattr(kernels, name, getattr(impl, name))
        yield
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_conv(impl, repeats):
    rng = np.random.default_rng(0)
    rows = []
    # (label, T, kernel, stride, cin, cout): the branch geometries at the
    # default config (d=32, 64 filters) plus one hierarchy conv and a head.
    cases = [
        ("scale conv s=5 (256x32, k17 s16)", 256, 17, 16, 32, 64),
        ("scale conv s=1 (16x32, k2 s1)", 16, 2, 1, 32, 64),
        ("hierarchy conv (16x320, k3 s2)", 16, 3, 2, 320, 320),
        ("head conv (16x1440, k3 s1)", 16, 3, 1, 1440, 8),
    ]
    for label, t, k, s, cin, cout in cases:
        x = rng.standard_normal((t, cin)).astype(np.float32)
        w = rng.standard_normal((k, cin, cout)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        pad = max(0, (-(-t // s) - 1) * s + k - t)
        pl, pr = pad // 2, pad - pad // 2
        y = impl.conv1d_forward(x, w, b, s, pl, pr)
        gy = rng.standard_normal(y.shape).astype(np.float32)
        fwd = timeit(lambda: impl.conv1d_forward(x, w, b, s, pl, pr), repeats)
        bwd = timeit(lambda: impl.conv1d_backward(x, w, s, pl, pr, gy), repeats)
        rows.append((label, fwd, bwd))
    return rows


def bench_pool(impl, repeats):
    rng = np.random.default_rng(0)
    rows = []
    cases = [
        ("scale pool s=5 (256x32, w16)", 256, 16, 32),
        ("hierarchy pool (16x160, w2)", 16, 2, 160),
    ]
    for label, t, w, c in cases:
        x = rng.standard_normal((t, c)).astype(np.float32)
        y, argmax = impl.maxpool1d_forward(x, w, w)
        gy = rng.standard_normal(y.shape).astype(np.float32)
        fwd = timeit(lambda: impl.maxpool1d_forward(x, w, w), repeats)
        bwd = timeit(lambda: impl.maxpool1d_backward(argmax, t, gy), repeats)
        rows.append((label, fwd, bwd))
    return rows


def bench_model(impl, repeats):
    cfg = ModelConfig(num_classes=3, scales=5, base_segments=16, feature_dim=32)
    model = PyramidDetector(cfg, seed=0)
    rng = np.random.default_rng(0)
    pyramid = PyramidFeature(
        [rng.standard_normal((16 << s, 32)).astype(np.float32) for s in range(5)]
    )

    def step():
        fp = model.forward(pyramid)
        for head in fp.heads:
            head.grad[:] = 1.0
        model.backward(fp)
        model.zero_grad()

    with backend(impl):
        return timeit(step, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    impls = [("numpy", _reference)]
    if _speedups is not None:
        impls.append(("cython", _speedups))
    else:
        print("compiled extension not built; benchmarking the fallback only\n")

    per_impl = {}
    for name, impl in impls:
        per_impl[name] = {
            "conv": bench_conv(impl, args.repeats),
            "pool": bench_pool(impl, args.repeats),
            "model": bench_model(impl, args.repeats),
        }

    def fmt(seconds):
        return f"{seconds * 1e6:9.1f}"

    print(f"{'case':<42} {'dir':<4}", end="")
    for name, _ in impls:
        print(f" {name + ' (us)':>14}", end="")
    if len(impls) == 2:
        print(f" {'speedup':>8}", end="")
    print()

    for kind in ("conv", "pool"):
        n_cases = len(per_impl[impls[0][0]][kind])
        for i in range(n_cases):
            label = per_impl[impls[0][0]][kind][i][0]
            for d, direction in ((1, "fwd"), (2, "bwd")):
                print(f"{label:<42} {direction:<4}", end="")
                times = []
                for name, _ in impls:
                    t = per_impl[name][kind][i][d]
                    times.append(t)
                    print(f" {fmt(t):>14}", end="")
                if len(times) == 2:
                    print(f" {times[0] / times[1]:>7.2f}x", end="")
                print()

    print(f"{'full model forward+backward':<42} {'':<4}", end="")
    times = []
    for name, _ in impls:
        t = per_impl[name]["model"]
        times.append(t)
        print(f" {fmt(t):>14}", end="")
    if len(times) == 2:
        print(f" {times[0] / times[1]:>7.2f}x", end="")
    print()


if __name__ == "__main__":
    main()
