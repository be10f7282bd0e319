"""Pure-numpy implementations of the hot kernels.

These mirror ``_native.pyx`` exactly; agreement between the two backends is
asserted in the test suite.  All functions take and return float64 arrays.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"


def similarity_maps(features: np.ndarray, prototypes: np.ndarray, epsilon: float) -> np.ndarray:
    """Log-ratio similarity of each prototype to each feature-map cell.

    ``features`` is (H, W, D), ``prototypes`` is (n, D); returns (n, H, W)
    with value log((d^2 + 1) / (d^2 + epsilon)) where d^2 is the squared
    euclidean distance between the cell vector and the prototype.
    """
    h, w, d = features.shape
    n = prototypes.shape[0]
    flat = features.reshape(h * w, d)
    out = np.empty((n, h, w), dtype=np.float64)
    for i in range(n):
        # Difference-based accumulation: exact d^2 = 0 on identical vectors.
        diff = flat - prototypes[i]
        dsq = np.einsum("cd,cd->c", diff, diff)
        out[i] = np.log((dsq + 1.0) / (dsq + epsilon)).reshape(h, w)
    return out


def _cubic_weights(length_src: int, length_dst: int) -> tuple[np.ndarray, np.ndarray]:
    """Catmull-Rom tap indices/weights for one axis (half-pixel centers)."""
    a = -0.5
    scale = length_src / length_dst
    x = (np.arange(length_dst, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(x).astype(np.int64)
    t = x - base
    idx = np.empty((length_dst, 4), dtype=np.int64)
    wgt = np.empty((length_dst, 4), dtype=np.float64)
    for k in range(4):
        offset = k - 1
        idx[:, k] = np.clip(base + offset, 0, length_src - 1)
        s = np.abs(t - offset)
        w = np.where(
            s <= 1.0,
            (a + 2.0) * s ** 3 - (a + 3.0) * s ** 2 + 1.0,
            a * (s ** 3 - 5.0 * s ** 2 + 8.0 * s - 4.0),
        )
        wgt[:, k] = np.where(s < 2.0, w, 0.0)
    return idx, wgt


def bicubic_upscale(src: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Separable Catmull-Rom upscale; negative ringing clamped to zero."""
    sh, sw = src.shape
    col_idx, col_wgt = _cubic_weights(sw, target_w)
    row_idx, row_wgt = _cubic_weights(sh, target_h)
    # Horizontal pass, then vertical (same order as the native kernel).
    horiz = np.zeros((sh, target_w), dtype=np.float64)
    for k in range(4):
        horiz += src[:, col_idx[:, k]] * col_wgt[:, k]
    out = np.zeros((target_h, target_w), dtype=np.float64)
    for k in range(4):
        out += horiz[row_idx[:, k], :] * row_wgt[:, k][:, None]
    np.clip(out, 0.0, None, out=out)
    return out


def box_blur3(img: np.ndarray, kernel: int = 3) -> np.ndarray:
    """k x k mean filter with edge replication on an (H, W) plane."""
    r = kernel // 2
    padded = np.pad(img, r, mode="edge")
    out = np.zeros_like(img, dtype=np.float64)
    h, w = img.shape
    for dy in range(kernel):
        for dx in range(kernel):
            out += padded[dy : dy + h, dx : dx + w]
    return out / float(kernel * kernel)
