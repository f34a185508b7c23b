"""Background synthesis kernels for the distracted environment.

The animated background is a sum of K traveling sine waves per channel,
evaluated per pixel and quantized to uint8. This is the one hot numeric
inner loop of the environment, so it ships in two interchangeable backends:
a numba-compiled kernel and a vectorized numpy fallback. Selection order is
the ``DREAMSIAM_NUMBA`` env var (0/false disables numba), then numba
availability. ``benchmarks/bench_render.py`` compares the two.

Backends agree up to libm-vs-SIMD rounding of ``sin``; after uint8
quantization individual pixels may differ by at most one level.
"""

from __future__ import annotations

import os

import numpy as np

IMG_SIZE = 64
# Background values stay inside [BG_LO, BG_HI] so foreground colors
# (pure white sprite, saturated goal marker) remain unique.
BG_LO = 16.0
BG_HI = 239.0


def _background_numpy(params: np.ndarray, phase: int) -> np.ndarray:
    """params: float64 [3, K, 5] rows (kx, ky, omega, phi0, amp)."""
    ys = np.arange(IMG_SIZE, dtype=np.float64)[:, None]
    xs = np.arange(IMG_SIZE, dtype=np.float64)[None, :]
    out = np.empty((IMG_SIZE, IMG_SIZE, 3), dtype=np.uint8)
    for c in range(3):
        acc = np.full((IMG_SIZE, IMG_SIZE), 128.0)
        for k in range(params.shape[1]):
            kx, ky, omega, phi0, amp = params[c, k]
            acc += amp * np.sin(kx * xs + ky * ys + omega * phase + phi0)
        out[:, :, c] = np.clip(acc, BG_LO, BG_HI).astype(np.uint8)
    return out


def _background_loops(params: np.ndarray, phase: int, out: np.ndarray) -> None:
    n_waves = params.shape[1]
    acc = np.empty((IMG_SIZE, IMG_SIZE))
    for c in range(3):
        acc[:] = 128.0
        for k in range(n_waves):
            kx = params[c, k, 0]
            ky = params[c, k, 1]
            base0 = params[c, k, 2] * phase + params[c, k, 3]
            amp = params[c, k, 4]
            for y in range(IMG_SIZE):
                row_base = ky * y + base0
                for x in range(IMG_SIZE):
                    acc[y, x] += amp * np.sin(kx * x + row_base)
        for y in range(IMG_SIZE):
            for x in range(IMG_SIZE):
                value = acc[y, x]
                if value < BG_LO:
                    value = BG_LO
                elif value > BG_HI:
                    value = BG_HI
                out[y, x, c] = np.uint8(value)


_HAVE_NUMBA = False
_background_numba = None
if os.environ.get("DREAMSIAM_NUMBA", "1").lower() not in ("0", "false", "off"):
    try:
        from numba import njit

        _background_numba = njit(cache=True, fastmath=True)(_background_loops)
        _HAVE_NUMBA = True
    except ImportError:
        pass

_BACKEND = "numba" if _HAVE_NUMBA else "numpy"


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown render backend {name!r}")
    if name == "numba" and not _HAVE_NUMBA:
        raise ValueError("numba backend unavailable (not installed or disabled by env)")
    _BACKEND = name


def get_backend() -> str:
    return _BACKEND


def render_background(params: np.ndarray, phase: int) -> np.ndarray:
    if _BACKEND == "numba":
        out = np.empty((IMG_SIZE, IMG_SIZE, 3), dtype=np.uint8)
        _background_numba(params, phase, out)
        return out
    return _background_numpy(params, phase)
