#!/usr/bin/env python3
"""Benchmark the environment's background synthesis kernels.

Compares the numba-compiled kernel against the vectorized numpy fallback on
identical wave tables, and reports per-frame times plus the agreement of the
quantized output. Run: python benchmarks/bench_render.py [--frames N]
"""

import argparse
import time

import numpy as np

from dreamsiam import _render
from dreamsiam.toyenv import DistractedPointMassEnv


def time_backend(backend: str, params, frames: int) -> float:
    _render.set_backend(backend)
    _render.render_background(params, 0)  # warm-up / JIT compile
    t0 = time.perf_counter()
    for phase in range(frames):
        _render.render_background(params, phase)
    return (time.perf_counter() - t0) / frames


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--frames", type=int, default=500)
    args = parser.parse_args()

    env = DistractedPointMassEnv(seed=0)
    env.reset()
    params = env.state.distractor.params

    available = ["numpy"] + (["numba"] if _render._HAVE_NUMBA else [])
    if "numba" not in available:
        print("numba backend unavailable (not installed or disabled via DREAMSIAM_NUMBA)")

    times = {}
    for backend in available:
        times[backend] = time_backend(backend, params, args.frames)
        print(f"{backend:>6}: {times[backend] * 1e3:8.3f} ms/frame "
              f"({1.0 / times[backend]:8.0f} fps)")

    if len(times) == 2:
        ratio = times["numpy"] / times["numba"]
        faster = "numba" if ratio > 1 else "numpy"
        print(f"speedup numpy/numba: {ratio:.2f}x ({faster} is faster here)")
        _render.set_backend("numpy")
        a = _render.render_background(params, 123).astype(int)
        _render.set_backend("numba")
        b = _render.render_background(params, 123).astype(int)
        print(f"quantized agreement: max abs diff {np.abs(a - b).max()} level(s), "
              f"{(a != b).mean() * 100:.3f}% pixels differ")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
