"""Small 2D raster helpers shared by the saliency and scoring paths."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter


def minmax01(x: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant input maps to all zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel centers and edge clamping."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    wy = ys - y0
    wx = xs - x0
    y0c = np.clip(y0.astype(np.int64), 0, h - 1)
    y1c = np.clip(y0.astype(np.int64) + 1, 0, h - 1)
    x0c = np.clip(x0.astype(np.int64), 0, w - 1)
    x1c = np.clip(x0.astype(np.int64) + 1, 0, w - 1)
    top = img[np.ix_(y0c, x0c)] * (1 - wx) + img[np.ix_(y0c, x1c)] * wx
    bot = img[np.ix_(y1c, x0c)] * (1 - wx) + img[np.ix_(y1c, x1c)] * wx
    return top * (1 - wy)[:, None] + bot * wy[:, None]


def gaussian_blur(img: np.ndarray, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Blur with a truncated Gaussian kernel renormalized at the borders."""
    img = np.asarray(img, dtype=np.float64)
    if sigma <= 0:
        return img.copy()
    blurred = gaussian_filter(img, sigma, mode="constant", truncate=truncate)
    support = gaussian_filter(np.ones_like(img), sigma, mode="constant", truncate=truncate)
    return blurred / support
