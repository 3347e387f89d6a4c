"""Rasterizer backend selection.

The compiled kernel is used when it was built; otherwise the NumPy fallback.
``FLOWSPLAT_BACKEND=python`` forces the fallback, ``=cython`` makes a
missing extension an import error.
"""

from __future__ import annotations

import logging
import os

from . import raster_numpy

log = logging.getLogger(__name__)

try:
    from . import _raster as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": raster_numpy}
if _compiled is not None:
    BACKENDS["cython"] = _compiled


def _default() -> str:
    choice = os.environ.get("FLOWSPLAT_BACKEND", "auto").lower()
    if choice == "python":
        return "python"
    if choice == "cython" and _compiled is None:
        raise ImportError("FLOWSPLAT_BACKEND=cython but the compiled rasterizer is not built")
    if _compiled is None:
        log.info("compiled rasterizer unavailable, using NumPy fallback")
        return "python"
    return "cython"


DEFAULT_BACKEND = _default()


def get_backend(name: str | None = None):
    name = name or DEFAULT_BACKEND
    if name not in BACKENDS:
        raise ValueError(f"rasterizer backend {name!r} not available (have {sorted(BACKENDS)})")
    return BACKENDS[name]
