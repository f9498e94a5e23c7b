"""Anti-aliased disc rasterization with a compiled fast path.

``BACKEND`` is ``"cython"`` when the extension imported, ``"python"`` otherwise.
Set ``ANGIOSYNTH_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _raster_py

if os.environ.get("ANGIOSYNTH_PURE_PYTHON"):
    _impl = None
else:
    try:
        from . import _raster as _impl
    except ImportError:  # extension not built
        _impl = None

BACKEND = "python" if _impl is None else "cython"


def stamp_discs(canvas, ys, xs, radii, amps, backend=None):
    """Max-composite discs onto ``canvas`` in place.

    Each disc contributes ``amp * clip(r + 0.5 - dist, 0, 1)`` so edges are
    anti-aliased over one pixel. ``canvas`` must be C-contiguous float64.
    """
    if canvas.dtype != np.float64 or not canvas.flags.c_contiguous:
        raise ValueError("canvas must be a C-contiguous float64 array")
    arrs = [np.ascontiguousarray(a, dtype=np.float64) for a in (ys, xs, radii, amps)]
    if len({a.shape for a in arrs}) != 1:
        raise ValueError("disc parameter arrays must have equal length")
    backend = backend or BACKEND
    if backend == "cython":
        if _impl is None:
            raise RuntimeError("compiled raster kernel is not available")
        _impl.stamp_discs(canvas, *arrs)
    elif backend == "python":
        _raster_py.stamp_discs(canvas, *arrs)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    return canvas
