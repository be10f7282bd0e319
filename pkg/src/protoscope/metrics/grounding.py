"""Ground-truth-anchored and size/performance metrics.

The mask metrics compare a prototype's activated region (the 95th-percentile
mask of its saliency map) with dataset annotations; the size metrics inspect
the classification layer; the performance block scores the stored outputs
against labels.  Weight-count thresholds treat anything within
``WEIGHT_EPSILON`` of zero as zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from protoscope.errors import (
    DegenerateSaliencyError,
    DegenerateSeriesError,
    EmptyMaskError,
    ShapeError,
    ValidationError,
)
from protoscope.metrics.change import descending_rank

#: weights with |w| <= epsilon count as zero.
WEIGHT_EPSILON = 1e-3
#: similarity scores above this fraction of the maximum count as "used".
LOCAL_SIZE_THRESHOLD = 0.1


def _mask_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ma = np.asarray(a).astype(bool)
    mb = np.asarray(b).astype(bool)
    if ma.shape != mb.shape or ma.ndim != 2:
        raise ShapeError(f"masks must share one 2-D shape, got {ma.shape} vs {mb.shape}")
    return ma, mb


def object_overlap(saliency_mask: np.ndarray, object_mask: np.ndarray) -> float:
    """Fraction of the object covered by the activated region: |v & m| / |m|."""
    v, m = _mask_pair(saliency_mask, object_mask)
    total = m.sum()
    if total == 0:
        raise EmptyMaskError("object mask has no active pixel")
    return float(np.logical_and(v, m).sum() / total)


def background_overlap(saliency_mask: np.ndarray, object_mask: np.ndarray) -> float:
    """Fraction of the activated region lying on background: 1 - |v & m| / |v|."""
    v, m = _mask_pair(saliency_mask, object_mask)
    total = v.sum()
    if total == 0:
        raise EmptyMaskError("saliency mask has no active pixel")
    return 1.0 - float(np.logical_and(v, m).sum() / total)


def iord(saliency: np.ndarray, object_mask: np.ndarray) -> float:
    """Inside-outside relevance difference of a max-normalized saliency map.

    Mean of the strictly positive saliency values inside the object minus the
    same mean outside; a side with no positive value contributes zero.  Lives
    in [-1, 1].
    """
    sal = np.asarray(saliency, dtype=np.float64)
    mask = np.asarray(object_mask).astype(bool)
    if sal.shape != mask.shape or sal.ndim != 2:
        raise ShapeError(f"saliency {sal.shape} and mask {mask.shape} must share one 2-D shape")
    if sal.min() < 0:
        raise ValidationError("saliency map must be nonnegative")
    top = sal.max()
    if top <= 0:
        raise DegenerateSaliencyError("saliency map has no positive value")
    norm = sal / top

    def side_mean(values: np.ndarray) -> float:
        positive = values[values > 0]
        return float(positive.mean()) if positive.size else 0.0

    return side_mean(norm[mask]) - side_mean(norm[~mask])


def consistency(
    hit_counts: Mapping[int, int], vocabulary: Iterable[int], image_count: int
) -> float:
    """Mean per-part hit rate over the full part vocabulary.

    ``hit_counts[part]`` counts the images whose annotated part fell inside
    the prototype's bounding box; parts never hit contribute zero.
    """
    vocab = list(vocabulary)
    if not vocab:
        raise ValidationError("part vocabulary is empty")
    if image_count < 1:
        raise ValidationError(f"image count must be >= 1, got {image_count}")
    for part, count in hit_counts.items():
        if count > image_count:
            raise ValidationError(f"part {part}: {count} hits in {image_count} images")
    return float(np.mean([hit_counts.get(p, 0) / image_count for p in vocab]))


# ---------------------------------------------------------------------------
# Size metrics
# ---------------------------------------------------------------------------

def _weight_matrix(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.size == 0:
        raise ShapeError(f"weight matrix must be nonempty 2-D, got shape {w.shape}")
    return w


def global_size(weights: np.ndarray, epsilon: float = WEIGHT_EPSILON) -> int:
    """Number of prototype columns carrying at least one non-zero weight."""
    w = _weight_matrix(weights)
    return int((np.abs(w) > epsilon).any(axis=0).sum())


def sparsity(weights: np.ndarray, epsilon: float = WEIGHT_EPSILON) -> float:
    """Fraction of zero entries in the classification layer."""
    w = _weight_matrix(weights)
    nonzero = int((np.abs(w) > epsilon).sum())
    return (w.size - nonzero) / w.size


def npr(weights: np.ndarray, epsilon: float = WEIGHT_EPSILON) -> float | None:
    """Negative-to-positive weight ratio.

    Returns 0.0 when no weight clears the threshold on either side, and
    ``None`` (an explicit "undefined" marker, excluded from aggregation)
    when negatives exist but positives do not.
    """
    w = _weight_matrix(weights)
    positives = int((w > epsilon).sum())
    negatives = int((w < -epsilon).sum())
    if positives == 0:
        return 0.0 if negatives == 0 else None
    return negatives / positives


def local_size(scores: np.ndarray, threshold: float = LOCAL_SIZE_THRESHOLD) -> int:
    """Number of prototypes activated above ``threshold`` of the sample max."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ShapeError(f"scores must be a nonempty vector, got shape {s.shape}")
    top = s.max()
    if top <= 0:
        raise DegenerateSeriesError("score vector has no positive value")
    return int((s / top > threshold).sum())


# ---------------------------------------------------------------------------
# Task performance
# ---------------------------------------------------------------------------

@dataclass
class PerformanceResult:
    accuracy: float
    top_k_accuracy: float | None
    f1: float
    mode: str  # "single-label" or "multi-label"


def _check_outputs(outputs: np.ndarray) -> np.ndarray:
    o = np.asarray(outputs, dtype=np.float64)
    if o.ndim != 2 or o.size == 0:
        raise ShapeError(f"outputs must be a nonempty (m, K) array, got shape {o.shape}")
    return o


def performance_single(
    outputs: np.ndarray, labels: Sequence[int], top_k: int = 3
) -> PerformanceResult:
    """Accuracy, top-k accuracy and macro-F1 for single-label outputs."""
    o = _check_outputs(outputs)
    y = np.asarray(labels, dtype=np.int64)
    m, k = o.shape
    if y.shape != (m,):
        raise ShapeError(f"{y.shape[0] if y.ndim else 0} labels for {m} outputs")
    if np.any((y < 0) | (y >= k)):
        raise ValidationError("label outside the class range")
    predictions = o.argmax(axis=1)
    accuracy = float((predictions == y).mean())
    in_top = [descending_rank(o[i], int(y[i])) <= top_k for i in range(m)]
    topk = float(np.mean(in_top))
    f1_per_class = []
    for c in range(k):
        tp = int(((predictions == c) & (y == c)).sum())
        fp = int(((predictions == c) & (y != c)).sum())
        fn = int(((predictions != c) & (y == c)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1_per_class.append(
            2 * precision * recall / (precision + recall) if precision + recall else 0.0
        )
    return PerformanceResult(accuracy, topk, float(np.mean(f1_per_class)), "single-label")


def performance_multi(
    outputs: np.ndarray, label_sets: Sequence[Iterable[int]]
) -> PerformanceResult:
    """Subset accuracy and micro-F1 for multi-label outputs (logit > 0 predicts).

    Top-k accuracy has no counterpart here and is reported as None.
    """
    o = _check_outputs(outputs)
    m, k = o.shape
    if len(label_sets) != m:
        raise ShapeError(f"{len(label_sets)} label sets for {m} outputs")
    sets = [frozenset(int(c) for c in ls) for ls in label_sets]
    for ls in sets:
        if any(not 0 <= c < k for c in ls):
            raise ValidationError("label outside the class range")
    predicted = [frozenset(np.flatnonzero(o[i] > 0).tolist()) for i in range(m)]
    accuracy = float(np.mean([predicted[i] == sets[i] for i in range(m)]))
    tp = fp = fn = 0
    for i in range(m):
        tp += len(predicted[i] & sets[i])
        fp += len(predicted[i] - sets[i])
        fn += len(sets[i] - predicted[i])
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0
    return PerformanceResult(accuracy, None, float(f1), "multi-label")
