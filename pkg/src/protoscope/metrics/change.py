"""Original-vs-perturbed change metrics.

Every function here compares one artifact from the unperturbed forward pass
with its counterpart after a perturbation.  All of them satisfy the identity
law — equal inputs give exactly zero — and the bounded ones live in [0, 1].

Conventions shared across the module:

* ``argmax`` ties resolve to the first cell in row-major order;
* ranks are 1-based positions in a descending sort, ties broken toward the
  lower index;
* curve overlaps use 1 - sum(min) / sum(max).
"""

from __future__ import annotations

import numpy as np

from protoscope.errors import (
    DegenerateOutputError,
    DegenerateSaliencyError,
    ShapeError,
    ValidationError,
)
from protoscope.perturb import Box, binarize_similarity


def _as_map(arr: np.ndarray, name: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2 or out.size == 0:
        raise ShapeError(f"{name} must be a nonempty 2-D array, got shape {out.shape}")
    return out


def _pair(a: np.ndarray, b: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    a = _as_map(a, name)
    b = _as_map(b, name)
    if a.shape != b.shape:
        raise ShapeError(f"{name} shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _curve_pair(a: np.ndarray, b: np.ndarray, name: str) -> tuple[np.ndarray, np.ndarray]:
    """Value-curve inputs: any nonempty shape, as long as the two agree."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or a.shape != b.shape:
        raise ShapeError(f"{name} shapes differ or are empty: {a.shape} vs {b.shape}")
    return a, b


def argmax_cell(arr: np.ndarray) -> tuple[int, int]:
    """(row, col) of the maximum; ties go to the first cell in row-major order."""
    a = _as_map(arr, "map")
    flat = int(np.argmax(a))
    return flat // a.shape[1], flat % a.shape[1]


def descending_rank(values: np.ndarray, index: int) -> int:
    """1-based rank of ``values[index]`` in a descending sort (ties: lower index first)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or not 0 <= index < v.shape[0]:
        raise ValidationError(f"index {index} invalid for a vector of shape {v.shape}")
    target = v[index]
    return int(1 + np.count_nonzero(v > target) + np.count_nonzero(v[:index] == target))


def _box_area(box: Box) -> int:
    r0, c0, r1, c1 = box
    if r1 <= r0 or c1 <= c0:
        raise ValidationError(f"degenerate box {box}")
    return (r1 - r0) * (c1 - c0)


def vlc(box_a: Box, box_b: Box) -> float:
    """Visualization location change: 1 - IoU of the two bounding boxes."""
    area_a = _box_area(box_a)
    area_b = _box_area(box_b)
    inter_h = min(box_a[2], box_b[2]) - max(box_a[0], box_b[0])
    inter_w = min(box_a[3], box_b[3]) - max(box_a[1], box_b[1])
    inter = max(inter_h, 0) * max(inter_w, 0)
    return 1.0 - inter / (area_a + area_b - inter)


def psc(score_a: float, score_b: float) -> float:
    """Prototype score change, relative to the original score."""
    a = float(score_a)
    if a <= 0:
        raise ValidationError(f"original score must be positive, got {a}")
    return abs(a - float(score_b)) / a


def vac(saliency_a: np.ndarray, saliency_b: np.ndarray) -> float:
    """Visualization activation change on sorted relevance curves.

    Both maps are flattened and sorted descending; the result is
    1 - sum(min)/sum(max) over the aligned curves, hence invariant to any
    spatial permutation of either map.
    """
    a, b = _curve_pair(saliency_a, saliency_b, "saliency map")
    if a.min() < 0 or b.min() < 0:
        raise ValidationError("saliency maps must be nonnegative")
    ca = np.sort(a.ravel())[::-1]
    cb = np.sort(b.ravel())[::-1]
    hi = np.maximum(ca, cb).sum()
    if hi == 0.0:
        raise DegenerateSaliencyError("both saliency maps are all-zero")
    return 1.0 - np.minimum(ca, cb).sum() / hi


def plc(map_a: np.ndarray, map_b: np.ndarray) -> float:
    """Prototype location change: L1 distance between the argmax cells."""
    a, b = _pair(map_a, map_b, "similarity map")
    ra, ca = argmax_cell(a)
    rb, cb = argmax_cell(b)
    return float(abs(ra - rb) + abs(ca - cb))


def palc(map_a: np.ndarray, map_b: np.ndarray) -> float:
    """Prototype activation-location change: 1 - IoU of the binarized maps."""
    a, b = _pair(map_a, map_b, "similarity map")
    ma = binarize_similarity(a)
    mb = binarize_similarity(b)
    union = np.logical_or(ma, mb).sum()
    inter = np.logical_and(ma, mb).sum()
    return 1.0 - inter / union


def pac(map_a: np.ndarray, map_b: np.ndarray) -> float:
    """Prototype activation change on *unsorted* maps.

    Deliberately elementwise (cells stay aligned), unlike :func:`vac`; the
    two therefore differ on permuted inputs, which is pinned by a regression
    test.
    """
    a, b = _curve_pair(map_a, map_b, "similarity map")
    if a.min() < 0 or b.min() < 0:
        raise ValidationError("similarity maps must be nonnegative")
    hi = np.maximum(a, b).sum()
    if hi == 0.0:
        raise DegenerateSaliencyError("both similarity maps are all-zero")
    return 1.0 - np.minimum(a, b).sum() / hi


def prc(scores_a: np.ndarray, scores_b: np.ndarray, prototype: int) -> float:
    """Prototype rank change of one prototype between two score vectors."""
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"score vectors must share one shape, got {a.shape} vs {b.shape}")
    return float(abs(descending_rank(a, prototype) - descending_rank(b, prototype)))


def cac(output_a: np.ndarray, output_b: np.ndarray) -> float:
    """Classification activation change over output logits (elementwise)."""
    a = np.asarray(output_a, dtype=np.float64)
    b = np.asarray(output_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ShapeError(f"outputs must be equal-length vectors, got {a.shape} vs {b.shape}")
    if a.min() < 0 or b.min() < 0:
        raise ValidationError("outputs must be nonnegative for activation change")
    hi = np.maximum(a, b).sum()
    if hi == 0.0:
        raise DegenerateOutputError("both outputs are all-zero")
    return 1.0 - np.minimum(a, b).sum() / hi


def crc(output_a: np.ndarray, output_b: np.ndarray) -> float:
    """Classification rank change of the originally predicted class."""
    a = np.asarray(output_a, dtype=np.float64)
    b = np.asarray(output_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise ShapeError(f"outputs must be equal-length vectors, got {a.shape} vs {b.shape}")
    predicted = int(np.argmax(a))
    return float(abs(descending_rank(a, predicted) - descending_rank(b, predicted)))
