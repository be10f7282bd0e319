"""Kernel backend selection.

The compiled extension (``protoscope.kernels._native``) is preferred when it
imported cleanly; otherwise the numpy fallback is used.  Set the environment
variable ``PROTOSCOPE_KERNELS`` to ``python`` or ``native`` to force a
backend (forcing ``native`` when the extension is absent raises ImportError).
"""

from __future__ import annotations

import os

import numpy as np

from protoscope.errors import ShapeError, ValidationError

_requested = os.environ.get("PROTOSCOPE_KERNELS", "").strip().lower()

if _requested == "python":
    from protoscope.kernels import fallback as _impl
elif _requested == "native":
    from protoscope.kernels import _native as _impl  # type: ignore[no-redef]
elif _requested == "":
    try:
        from protoscope.kernels import _native as _impl  # type: ignore[no-redef]
    except ImportError:
        from protoscope.kernels import fallback as _impl
else:
    raise ImportError(
        f"PROTOSCOPE_KERNELS={_requested!r} not understood (use 'python' or 'native')"
    )

BACKEND: str = _impl.BACKEND


def _as_f64(arr: np.ndarray, rank: int, name: str) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim != rank:
        raise ShapeError(f"{name} must have rank {rank}, got {out.ndim}")
    return out


def similarity_maps(features: np.ndarray, prototypes: np.ndarray, epsilon: float) -> np.ndarray:
    """Batched log-ratio similarity: (H,W,D) x (n,D) -> (n,H,W)."""
    features = _as_f64(features, 3, "features")
    prototypes = _as_f64(prototypes, 2, "prototypes")
    if features.shape[2] != prototypes.shape[1]:
        raise ShapeError(
            f"feature depth {features.shape[2]} != prototype depth {prototypes.shape[1]}"
        )
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must be in (0, 1), got {epsilon}")
    return np.asarray(_impl.similarity_maps(features, prototypes, float(epsilon)))


def bicubic_upscale(src: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Catmull-Rom upscale of a 2-D map; target must be >= source per axis."""
    src = _as_f64(src, 2, "similarity map")
    if target_h < src.shape[0] or target_w < src.shape[1]:
        raise ShapeError(
            f"target {target_h}x{target_w} smaller than source {src.shape[0]}x{src.shape[1]}"
        )
    return np.asarray(_impl.bicubic_upscale(src, int(target_h), int(target_w)))


def box_blur(img: np.ndarray, kernel: int = 3) -> np.ndarray:
    """Odd-sized k x k mean filter with edge replication on a 2-D plane."""
    img = _as_f64(img, 2, "image plane")
    if kernel < 1 or kernel % 2 == 0:
        raise ValidationError(f"blur kernel must be odd and positive, got {kernel}")
    return np.asarray(_impl.box_blur3(img, int(kernel)))
