"""Pure-numpy disc stamping, used when the compiled kernel is unavailable."""
import math

import numpy as np


def stamp_discs(canvas, ys, xs, radii, amps):
    h, w = canvas.shape
    for cy, cx, r, a in zip(ys, xs, radii, amps):
        reach = r + 0.5
        i0 = max(int(math.floor(cy - reach)), 0)
        i1 = min(int(math.ceil(cy + reach)), h - 1)
        j0 = max(int(math.floor(cx - reach)), 0)
        j1 = min(int(math.ceil(cx + reach)), w - 1)
        if i0 > i1 or j0 > j1:
            continue
        dy = np.arange(i0, i1 + 1, dtype=np.float64)[:, None] - cy
        dx = np.arange(j0, j1 + 1, dtype=np.float64)[None, :] - cx
        v = reach - np.sqrt(dy * dy + dx * dx)
        v = a * np.minimum(v, 1.0)
        v[v <= 0.0] = 0.0
        window = canvas[i0:i1 + 1, j0:j1 + 1]
        np.maximum(window, v, out=window)
