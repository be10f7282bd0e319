"""Prototype-layer forward math and training-side losses.

Everything here is a pure float64 function of arrays; this module is the only
place where the three supported model families branch:

* ``explicit-class-specific`` — each prototype vector belongs to one class,
  the classifier is a dense map from similarity scores to logits.
* ``explicit-shared`` — prototypes are shared through per-(class, slot)
  assignment distributions; slots aggregate focal similarities.
* ``indirect`` — prototypes are channels of the feature map; per-cell softmax
  produces the similarity maps and the output applies a log-square transform
  to score-weight products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from protoscope import kernels
from protoscope.errors import ShapeError, ValidationError
from protoscope.interchange import ModelBundle

#: slot distributions may deviate from unit mass by this much.
SLOT_SUM_TOL = 1e-5


# ---------------------------------------------------------------------------
# Similarity primitives
# ---------------------------------------------------------------------------

def log_ratio_similarity(squared_distance, epsilon: float = 1e-4):
    """log((d^2 + 1) / (d^2 + epsilon)) — strictly decreasing in d^2."""
    dsq = np.asarray(squared_distance, dtype=np.float64)
    if np.any(dsq < 0):
        raise ValidationError("squared distances must be nonnegative")
    if not 0.0 < epsilon < 1.0:
        raise ValidationError(f"epsilon must be in (0, 1), got {epsilon}")
    return np.log((dsq + 1.0) / (dsq + epsilon))


def similarity_map(feature_map: np.ndarray, prototype: np.ndarray, epsilon: float = 1e-4) -> np.ndarray:
    """Similarity of one prototype to every cell of an (H, W, D) feature map."""
    prototype = np.asarray(prototype, dtype=np.float64)
    if prototype.ndim != 1:
        raise ShapeError(f"prototype must be a vector, got rank {prototype.ndim}")
    return kernels.similarity_maps(feature_map, prototype[None, :], epsilon)[0]


def _check_map(arr: np.ndarray, name: str = "similarity map") -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ShapeError(f"{name} must be a nonempty 2-D array, got shape {arr.shape}")
    return arr


def max_pool_score(similarity: np.ndarray) -> float:
    """Scalar similarity score: the maximum over all map cells."""
    return float(_check_map(similarity).max())


def focal_similarity(similarity: np.ndarray) -> float:
    """Focal score: maximum minus mean, rewarding localized activation."""
    arr = _check_map(similarity)
    return float(arr.max() - arr.mean())


def slot_aggregate(slot_distribution: np.ndarray, focal_scores: np.ndarray) -> float:
    """Aggregate per-prototype focal scores under one slot distribution."""
    q = np.asarray(slot_distribution, dtype=np.float64)
    g = np.asarray(focal_scores, dtype=np.float64)
    if q.shape != g.shape or q.ndim != 1:
        raise ShapeError(f"slot distribution {q.shape} and scores {g.shape} must be equal-length vectors")
    if np.any(q < 0) or abs(q.sum() - 1.0) > SLOT_SUM_TOL:
        raise ValidationError("slot distribution must be nonnegative and sum to 1")
    return float(q @ g)


def pipnet_prototype_maps(feature_map: np.ndarray) -> np.ndarray:
    """Per-cell softmax over channels: (H, W, D) -> (D, H, W) map stack."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3:
        raise ShapeError(f"feature map must be (H, W, D), got {fm.shape}")
    shifted = fm - fm.max(axis=2, keepdims=True)
    ex = np.exp(shifted)
    soft = ex / ex.sum(axis=2, keepdims=True)
    return np.transpose(soft, (2, 0, 1))


def pipnet_output(score: float, weight: float) -> float:
    """Single score-weight contribution: log((s * w)^2 + 1)."""
    if weight < 0:
        raise ValidationError(f"indirect models use nonnegative weights, got {weight}")
    sw = float(score) * float(weight)
    return float(np.log(sw * sw + 1.0))


# ---------------------------------------------------------------------------
# Classification heads
# ---------------------------------------------------------------------------

def classify(scores: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Dense head for class-specific models: logits = weights @ scores."""
    s = np.asarray(scores, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if s.ndim != 1 or w.ndim != 2 or w.shape[1] != s.shape[0]:
        raise ShapeError(f"weights {w.shape} incompatible with scores {s.shape}")
    return w @ s


def classify_slotted(slot_scores: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Slotted head: logit_k = sum_l weights[k, l] * slot_scores[k, l]."""
    g = np.asarray(slot_scores, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if g.shape != w.shape or g.ndim != 2:
        raise ShapeError(f"slot scores {g.shape} must match weights {w.shape}")
    return (w * g).sum(axis=1)


def classify_indirect(scores: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Indirect head: logit_k = sum_m log((s_m * w[k, m])^2 + 1)."""
    s = np.asarray(scores, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if s.ndim != 1 or w.ndim != 2 or w.shape[1] != s.shape[0]:
        raise ShapeError(f"weights {w.shape} incompatible with scores {s.shape}")
    if np.any(w < 0):
        raise ValidationError("indirect models use nonnegative weights")
    sw = w * s[None, :]
    return np.log(sw * sw + 1.0).sum(axis=1)


def presence_matrix(slot_assignment: np.ndarray) -> np.ndarray:
    """Per-class prototype presence: (K, L, n) -> (K, n) summed over slots."""
    sa = np.asarray(slot_assignment, dtype=np.float64)
    if sa.ndim != 3:
        raise ShapeError(f"slot assignment must be (K, L, n), got {sa.shape}")
    return sa.sum(axis=1)


def forward_artifacts(model: ModelBundle, feature_map: np.ndarray):
    """Regenerate (similarity_maps, scores, output) from a feature map.

    This is the composition the pipeline uses for both the original and the
    perturbed side whenever feature maps are available, so that identical
    inputs produce bit-identical artifacts.
    """
    fm = np.asarray(feature_map, dtype=np.float64)
    if model.kind == "indirect":
        maps = pipnet_prototype_maps(fm)
        scores = maps.reshape(maps.shape[0], -1).max(axis=1)
        output = classify_indirect(scores, model.classifier_weights)
        return maps, scores, output
    if model.prototypes is None:
        raise ValidationError("explicit model bundle lacks prototype vectors")
    maps = kernels.similarity_maps(fm, model.prototypes, model.epsilon)
    scores = maps.reshape(maps.shape[0], -1).max(axis=1)
    if model.kind == "explicit-class-specific":
        output = classify(scores, model.classifier_weights)
    else:  # explicit-shared
        focal = maps.reshape(maps.shape[0], -1)
        focal = focal.max(axis=1) - focal.mean(axis=1)
        slot_scores = np.einsum("kln,n->kl", np.asarray(model.slot_assignment, dtype=np.float64), focal)
        output = classify_slotted(slot_scores, model.classifier_weights)
    return maps, scores, output


# ---------------------------------------------------------------------------
# Prototype projection
# ---------------------------------------------------------------------------

def project_prototypes(
    prototypes: np.ndarray, candidate_sets: Sequence[np.ndarray]
) -> tuple[np.ndarray, list[int]]:
    """Snap each prototype onto its nearest candidate feature vector.

    ``candidate_sets[i]`` holds the (m_i, D) pool for prototype i (its own
    class's features for class-specific models, all features for shared
    ones).  Distance ties resolve to the lowest candidate index, which makes
    the operation idempotent.  Returns the projected set and chosen indices.
    """
    protos = np.asarray(prototypes, dtype=np.float64)
    if protos.ndim != 2:
        raise ShapeError(f"prototypes must be (n, D), got {protos.shape}")
    if len(candidate_sets) != protos.shape[0]:
        raise ValidationError(
            f"{len(candidate_sets)} candidate sets for {protos.shape[0]} prototypes"
        )
    projected = np.empty_like(protos)
    chosen: list[int] = []
    for i, pool in enumerate(candidate_sets):
        cand = np.asarray(pool, dtype=np.float64)
        if cand.ndim != 2 or cand.shape[0] == 0:
            raise ValidationError(f"prototype {i}: candidate set must be a nonempty (m, D) array")
        if cand.shape[1] != protos.shape[1]:
            raise ShapeError(
                f"prototype {i}: candidate depth {cand.shape[1]} != prototype depth {protos.shape[1]}"
            )
        diff = cand - protos[i]
        best = int(np.argmin(np.einsum("md,md->m", diff, diff)))
        projected[i] = cand[best]
        chosen.append(best)
    return projected, chosen


# ---------------------------------------------------------------------------
# Training-side losses
# ---------------------------------------------------------------------------

@dataclass
class LossValue:
    value: float
    kind: str


def _cells(feature_map: np.ndarray) -> np.ndarray:
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3 or fm.size == 0:
        raise ShapeError(f"feature map must be a nonempty (H, W, D) array, got {fm.shape}")
    return fm.reshape(-1, fm.shape[2])


def _min_sq_distance(cells: np.ndarray, prototype: np.ndarray) -> float:
    diff = cells - prototype
    return float(np.einsum("md,md->m", diff, diff).min())


def _class_prototype_split(
    prototypes: np.ndarray, prototype_classes: np.ndarray, class_count: int
) -> dict[int, np.ndarray]:
    groups: dict[int, np.ndarray] = {}
    for k in range(class_count):
        groups[k] = np.flatnonzero(prototype_classes == k)
    return groups


def _assignment_losses(
    feature_maps: Sequence[np.ndarray],
    label_sets: Sequence[Iterable[int]],
    prototypes: np.ndarray,
    prototype_classes: np.ndarray,
    *,
    separation: bool,
) -> float:
    protos = np.asarray(prototypes, dtype=np.float64)
    classes = np.asarray(prototype_classes, dtype=np.int64)
    if protos.ndim != 2 or classes.shape != (protos.shape[0],):
        raise ShapeError("prototypes must be (n, D) with one class id per prototype")
    if len(feature_maps) != len(label_sets) or len(feature_maps) == 0:
        raise ValidationError("need equally many feature maps and label sets (at least one)")
    class_count = int(classes.max()) + 1 if classes.size else 0
    groups = _class_prototype_split(protos, classes, class_count)
    total = 0.0
    for fm, labels in zip(feature_maps, label_sets):
        cells = _cells(fm)
        labels = sorted(set(int(c) for c in labels))
        if not labels:
            raise ValidationError("sample with an empty label set")
        per_class = []
        for k in labels:
            if separation:
                idx = np.flatnonzero(classes != k)
                if idx.size == 0:
                    raise ValidationError(f"class {k}: no non-class prototype to separate from")
            else:
                idx = groups.get(k, np.empty(0, dtype=np.int64))
                if idx.size == 0:
                    raise ValidationError(f"class {k} has no assigned prototype")
            per_class.append(min(_min_sq_distance(cells, protos[j]) for j in idx))
        total += sum(per_class) / len(per_class)
    mean = total / len(feature_maps)
    return -mean if separation else mean


def cluster_loss(
    feature_maps: Sequence[np.ndarray],
    label_sets: Sequence[Iterable[int]],
    prototypes: np.ndarray,
    prototype_classes: np.ndarray,
) -> LossValue:
    """Pull each labeled class's nearest prototype toward the sample.

    Batch mean over samples of the mean over assigned classes of the minimum
    (over that class's prototypes, then over map cells) squared distance.
    Always nonnegative.
    """
    value = _assignment_losses(
        feature_maps, label_sets, prototypes, prototype_classes, separation=False
    )
    return LossValue(value, "cluster")


def separation_loss(
    feature_maps: Sequence[np.ndarray],
    label_sets: Sequence[Iterable[int]],
    prototypes: np.ndarray,
    prototype_classes: np.ndarray,
) -> LossValue:
    """Push non-class prototypes away: negated analog of the cluster term.

    For every assigned class the inner minimum runs over prototypes *not*
    belonging to that class.  Always nonpositive.
    """
    value = _assignment_losses(
        feature_maps, label_sets, prototypes, prototype_classes, separation=True
    )
    return LossValue(value, "separation")


def margin_loss(output: np.ndarray, labels: Iterable[int], class_count: int | None = None) -> LossValue:
    """Multi-label margin: hinge on every (labeled, unlabeled) logit pair.

    L = (1/K) * sum_{j in Y} sum_{i not in Y} max(0, 1 - (o_j - o_i)).
    """
    o = np.asarray(output, dtype=np.float64)
    if o.ndim != 1 or o.size == 0:
        raise ShapeError(f"output must be a nonempty vector, got shape {o.shape}")
    k = o.shape[0] if class_count is None else int(class_count)
    if k != o.shape[0]:
        raise ShapeError(f"output length {o.shape[0]} != class count {k}")
    y = sorted(set(int(c) for c in labels))
    if not y or any(not 0 <= c < k for c in y):
        raise ValidationError(f"label set {y} invalid for {k} classes")
    rest = [i for i in range(k) if i not in y]
    total = 0.0
    for j in y:
        for i in rest:
            total += max(0.0, 1.0 - (o[j] - o[i]))
    return LossValue(total / k, "margin")


def orthogonal_loss(slot_distributions: np.ndarray) -> LossValue:
    """Mean cosine similarity over all unordered slot pairs (class-blind)."""
    slots = np.asarray(slot_distributions, dtype=np.float64)
    if slots.ndim != 2 or slots.shape[0] < 2:
        raise ShapeError(f"need at least two slot rows, got shape {slots.shape}")
    norms = np.linalg.norm(slots, axis=1)
    if np.any(norms == 0):
        raise ValidationError("slot distribution with zero norm")
    unit = slots / norms[:, None]
    cos = unit @ unit.T
    m = slots.shape[0]
    iu = np.triu_indices(m, k=1)
    return LossValue(float(cos[iu].mean()), "orthogonal")
