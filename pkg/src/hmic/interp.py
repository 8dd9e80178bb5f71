"""Corner-aligned bilinear interpolation on float arrays."""
from __future__ import annotations

import numpy as np


def _axis_coords(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2.0])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def bilinear(array, out_h: int, out_w: int):
    """Resize the first two axes of ``array`` to ``(out_h, out_w)``.

    Output corners sample input corners exactly; a length-1 output axis samples the centre.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("target size must be >= 1")
    a = np.asarray(array, dtype=np.float64)
    h, w = a.shape[:2]
    y0, y1, fy = _axis_coords(h, out_h)
    x0, x1, fx = _axis_coords(w, out_w)
    extra = (1,) * (a.ndim - 2)
    fy = fy.reshape((-1, 1) + extra)
    fx = fx.reshape((1, -1) + extra)
    top = a[y0][:, x0] * (1 - fx) + a[y0][:, x1] * fx
    bottom = a[y1][:, x0] * (1 - fx) + a[y1][:, x1] * fx
    return top * (1 - fy) + bottom * fy
