"""Shared shape arithmetic for 'same'-padded windows and bilinear resampling.

Both kernel backends import these so the two implementations can never
disagree about output geometry.
"""

import numpy as np


def same_pad(in_size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Return (out_size, pad_before, pad_after) for 'same' padding.

    out_size = ceil(in_size / stride); padding is split with the smaller
    half leading, the convention used by the original tensor libraries
    this package's layouts follow.
    """
    out = -(-in_size // stride)
    total = max((out - 1) * stride + k - in_size, 0)
    before = total // 2
    return out, before, total - before


def bilinear_coords(in_size: int, out_size: int):
    """Half-pixel-center source coordinates for 1-D bilinear resampling.

    Returns (lo, hi, frac): integer neighbor indices and the blend weight
    of the upper neighbor, so value = (1-frac)*x[lo] + frac*x[hi].
    """
    t = np.arange(out_size, dtype=np.float64)
    src = (t + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    return lo, hi, frac
