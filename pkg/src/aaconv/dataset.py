"""Synthetic translated-shapes classification data.

Each sample is a 16x16x3 image containing one of four glyphs (filled square,
hollow square, cross, diagonal stripe) at a uniformly random offset, with
additive Gaussian noise. Generation is a pure function of (seed, index), so
any sample can be recreated in isolation.
"""

import numpy as np

CLASS_NAMES = ("filled_square", "hollow_square", "cross", "stripe")
GLYPH = 7  # glyph side length


def _glyph_masks():
    g = GLYPH
    filled = np.ones((g, g), dtype=np.float32)
    hollow = np.ones((g, g), dtype=np.float32)
    hollow[1:-1, 1:-1] = 0.0
    cross = np.zeros((g, g), dtype=np.float32)
    cross[g // 2 - 1 : g // 2 + 2, :] = 1.0
    cross[:, g // 2 - 1 : g // 2 + 2] = 1.0
    stripe = np.zeros((g, g), dtype=np.float32)
    for i in range(g):
        stripe[i, max(i - 1, 0) : min(i + 2, g)] = 1.0
    return np.stack([filled, hollow, cross, stripe])


_MASKS = _glyph_masks()


def synth_image(seed: int, index: int, size: int = 16, channels: int = 3,
                noise: float = 0.1):
    """One labeled sample; bit-identical for identical (seed, index)."""
    rng = np.random.default_rng([seed, index])
    label = int(rng.integers(0, len(_MASKS)))
    oy = int(rng.integers(0, size - GLYPH + 1))
    ox = int(rng.integers(0, size - GLYPH + 1))
    img = np.zeros((size, size, channels), dtype=np.float32)
    img[oy : oy + GLYPH, ox : ox + GLYPH, :] = _MASKS[label][:, :, None]
    if noise > 0:
        img += (noise * rng.standard_normal((size, size, channels))).astype(np.float32)
    return img, label


def synth_dataset(seed: int, n: int, size: int = 16, channels: int = 3,
                  noise: float = 0.1, start: int = 0):
    """n consecutive samples beginning at `start`; X is (n, size, size, C)."""
    xs = np.empty((n, size, size, channels), dtype=np.float32)
    ys = np.empty(n, dtype=np.int64)
    for i in range(n):
        xs[i], ys[i] = synth_image(seed, start + i, size, channels, noise)
    return xs, ys
