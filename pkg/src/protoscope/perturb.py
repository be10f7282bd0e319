"""Saliency-driven and photometric perturbation protocols.

Two protocols are implemented:

* **occlusion** — keep the tightest bounding box around the strongest 5 % of
  a prototype's saliency and drown everything outside it in Gaussian noise;
* **photometric** — a fixed seven-step chain (brightness, contrast,
  saturation, hue, additive noise, JPEG round-trip, box blur) applied to the
  whole image.

Steps configured at their neutral setting are skipped structurally, so a
fully neutral configuration is an *exact* identity.  All randomness flows
through :func:`derive_rng`, a counter-based generator keyed by
``(seed, *stream parts)`` so results never depend on execution order.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from protoscope import kernels
from protoscope.errors import (
    DegenerateSaliencyError,
    EmptyMaskError,
    ShapeError,
    ValidationError,
)

Box = tuple[int, int, int, int]  # (row0, col0, row1, col1), half-open


# ---------------------------------------------------------------------------
# Configuration and RNG streams
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbationConfig:
    """Settings for both protocols (defaults follow the evaluation recipe)."""

    percentile: float = 95.0        # saliency crop threshold
    occlusion_sigma: float = 0.05   # noise level outside the box
    brightness: float = 0.125       # fractional increase
    contrast: float = 0.125         # fractional increase around the mean
    saturation: float = 0.125       # fractional increase of HSV saturation
    hue_shift: float = 0.05         # fraction of a full hue turn
    noise_sigma: float = 0.05       # additive Gaussian noise level
    jpeg_quality: int | None = 90   # None skips the JPEG round-trip
    blur_kernel: int | None = 3     # None (or 1) skips the blur
    seed: int = 0

    @classmethod
    def identity(cls, seed: int = 0) -> "PerturbationConfig":
        """A configuration whose every step is a no-op."""
        return cls(
            percentile=95.0,
            occlusion_sigma=0.0,
            brightness=0.0,
            contrast=0.0,
            saturation=0.0,
            hue_shift=0.0,
            noise_sigma=0.0,
            jpeg_quality=None,
            blur_kernel=None,
            seed=seed,
        )

    def with_seed(self, seed: int) -> "PerturbationConfig":
        return replace(self, seed=seed)


def _stream_key(part) -> int:
    digest = hashlib.sha256(repr(part).encode("utf8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, *parts) -> np.random.Generator:
    """Deterministic per-stream generator, e.g. ``derive_rng(seed, sid, pid)``.

    The stream depends only on the key parts, never on call order, so
    parallel schedules reproduce serial results bit for bit.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_stream_key(p) for p in parts]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


# ---------------------------------------------------------------------------
# Saliency geometry
# ---------------------------------------------------------------------------

def _check_saliency(saliency: np.ndarray) -> np.ndarray:
    arr = np.asarray(saliency, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"saliency map must be a nonempty 2-D array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("saliency map contains non-finite values")
    return arr


def percentile_mask(saliency: np.ndarray, percentile: float = 95.0) -> np.ndarray:
    """Boolean mask of cells strictly above the linear-interpolation percentile."""
    arr = _check_saliency(saliency)
    if not 0.0 <= percentile <= 100.0:
        raise ValidationError(f"percentile must lie in [0, 100], got {percentile}")
    threshold = np.percentile(arr, percentile, method="linear")
    mask = arr > threshold
    if not mask.any():
        raise DegenerateSaliencyError(
            f"no cell above the {percentile} percentile (constant map?)"
        )
    return mask


def bounding_box(mask: np.ndarray) -> Box:
    """Tightest half-open (row0, col0, row1, col1) box around active cells."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
    rows = np.flatnonzero(arr.any(axis=1))
    cols = np.flatnonzero(arr.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("mask has no active cell")
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def percentile_crop(saliency: np.ndarray, percentile: float = 95.0):
    """Crop a saliency map to its strongest cells.

    Returns ``(cropped, mask, box)``: the map with sub-threshold cells zeroed,
    the boolean mask itself, and the mask's bounding box.
    """
    arr = _check_saliency(saliency)
    mask = percentile_mask(arr, percentile)
    return arr * mask, mask, bounding_box(mask)


def binarize_similarity(similarity: np.ndarray) -> np.ndarray:
    """Min-max normalize then threshold at 0.5 (strict); constant maps are all-on."""
    arr = _check_saliency(similarity)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.ones_like(arr, dtype=bool)
    return (arr - lo) / (hi - lo) > 0.5


def upscale_similarity(similarity: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Reference visualizer: cubic upscale of a similarity map to image size.

    Catmull-Rom interpolation with half-pixel-center alignment; negative
    ringing is clamped to zero so the result is a valid saliency map.
    """
    return kernels.bicubic_upscale(np.asarray(similarity, dtype=np.float64), target_h, target_w)


# ---------------------------------------------------------------------------
# Occlusion protocol
# ---------------------------------------------------------------------------

def _check_image(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.size == 0:
        raise ShapeError(f"image must be (H, W, 3), got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(
            f"image values outside [0, 1] (min {arr.min():.4g}, max {arr.max():.4g})"
        )
    return arr


def occlude_outside(
    image: np.ndarray,
    box: Box,
    sigma: float = 0.05,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Add Gaussian noise to every pixel outside the box, clamp to [0, 1].

    Pixels inside the (half-open) box are returned bit-identically.
    """
    img = _check_image(image)
    r0, c0, r1, c1 = (int(v) for v in box)
    h, w = img.shape[:2]
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ValidationError(f"box {box} invalid for a {h}x{w} image")
    if sigma < 0:
        raise ValidationError(f"noise level must be nonnegative, got {sigma}")
    if sigma == 0.0:
        return img.copy()
    if rng is None:
        rng = derive_rng(0)
    out = np.clip(img + rng.normal(0.0, sigma, img.shape), 0.0, 1.0)
    out[r0:r1, c0:c1] = img[r0:r1, c0:c1]
    return out


# ---------------------------------------------------------------------------
# Photometric protocol
# ---------------------------------------------------------------------------

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV with every channel in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    v = rgb.max(axis=-1)
    c = v - rgb.min(axis=-1)
    safe_v = np.where(v > 0, v, 1.0)
    s = np.where(v > 0, c / safe_v, 0.0)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r,
        ((g - b) / safe_c) % 6.0,
        np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c > 0, h / 6.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB, the inverse of :func:`rgb_to_hsv`."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    sector = np.floor(h6).astype(np.int64) % 6
    f = h6 - np.floor(h6)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(sector, [v, q, p, p, t, v])
    g = np.choose(sector, [t, v, v, q, p, p])
    b = np.choose(sector, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def _jpeg_roundtrip(img: np.ndarray, quality: int) -> np.ndarray:
    """Baseline 4:2:0 JPEG encode/decode through the bundled codec."""
    byte_img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(byte_img, mode="RGB").save(
        buf, format="JPEG", quality=int(quality), subsampling=2
    )
    buf.seek(0)
    decoded = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64)
    return decoded / 255.0


def photometric_suite(
    image: np.ndarray,
    config: PerturbationConfig | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply the seven-step photometric chain in its fixed order."""
    cfg = config or PerturbationConfig()
    img = _check_image(image)
    if rng is None:
        rng = derive_rng(cfg.seed, "photometric")

    if cfg.brightness != 0.0:
        img = np.clip(img * (1.0 + cfg.brightness), 0.0, 1.0)
    if cfg.contrast != 0.0:
        mean = img.mean(axis=(0, 1), keepdims=True)
        img = np.clip(mean + (1.0 + cfg.contrast) * (img - mean), 0.0, 1.0)
    if cfg.saturation != 0.0:
        hsv = rgb_to_hsv(img)
        hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + cfg.saturation), 0.0, 1.0)
        img = hsv_to_rgb(hsv)
    if cfg.hue_shift != 0.0:
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + cfg.hue_shift) % 1.0
        img = hsv_to_rgb(hsv)
    if cfg.noise_sigma != 0.0:
        if cfg.noise_sigma < 0:
            raise ValidationError(f"noise level must be nonnegative, got {cfg.noise_sigma}")
        img = np.clip(img + rng.normal(0.0, cfg.noise_sigma, img.shape), 0.0, 1.0)
    if cfg.jpeg_quality is not None:
        if not 1 <= int(cfg.jpeg_quality) <= 100:
            raise ValidationError(f"jpeg quality must be in [1, 100], got {cfg.jpeg_quality}")
        img = _jpeg_roundtrip(img, cfg.jpeg_quality)
    if cfg.blur_kernel not in (None, 1):
        blurred = np.empty_like(img)
        for ch in range(3):
            blurred[..., ch] = kernels.box_blur(img[..., ch], int(cfg.blur_kernel))
        img = blurred
    return np.clip(img, 0.0, 1.0)
