"""Rasterization kernel with backend selection at import time.

The compiled Cython kernel is preferred; a vectorized NumPy implementation
of the identical arithmetic is the fallback.  Set HEADFORGE_FORCE_NUMPY=1 to
skip the compiled kernel (used by the benchmark and the agreement tests).
"""

import os

from . import raster_numpy


def _want_numpy() -> bool:
    return os.environ.get("HEADFORGE_FORCE_NUMPY", "0") not in ("", "0")


if _want_numpy():
    raster_buffers = raster_numpy.raster_buffers
    BACKEND = "numpy"
else:
    try:
        from ._raster import raster_buffers  # type: ignore[attr-defined]

        BACKEND = "cython"
    except ImportError:
        raster_buffers = raster_numpy.raster_buffers
        BACKEND = "numpy"


def active_backend() -> str:
    return BACKEND


__all__ = ["raster_buffers", "active_backend", "BACKEND", "raster_numpy"]
