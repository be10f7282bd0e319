"""Between-class separation and activation-distribution metrics.

The vector-set metrics consume per-class collections built from the top-5
most-activated prototypes of every test image: the prototype vectors
themselves and the feature vectors nearest to them.  Cosine distances are
``1 - cos``, so pair distances live in [0, 2] and every metric here is
invariant to positive rescaling of individual vectors.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from protoscope.errors import (
    DegenerateSeriesError,
    ShapeError,
    ValidationError,
)
from protoscope.metrics.change import argmax_cell

#: normalized-score histogram resolution for activation entropy.
ENTROPY_BINS = 10


def top_prototypes(scores: np.ndarray, k: int = 5) -> tuple[list[int], int]:
    """Indices of the k largest scores, descending, ties toward lower index.

    Returns ``(indices, shortfall)`` where ``shortfall`` is how many
    prototypes were missing when fewer than k exist (all are used then).
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ShapeError(f"scores must be a nonempty vector, got shape {s.shape}")
    if k < 1:
        raise ValidationError(f"k must be positive, got {k}")
    order = np.argsort(-s, kind="stable")
    take = min(k, s.shape[0])
    return [int(i) for i in order[:take]], max(0, k - s.shape[0])


def _pair_mean(maps: Sequence[np.ndarray], fn) -> float:
    if len(maps) < 2:
        raise ValidationError(f"need at least two maps, got {len(maps)}")
    vals = []
    for i in range(len(maps)):
        for j in range(i + 1, len(maps)):
            vals.append(fn(maps[i], maps[j]))
    return float(np.mean(vals))


def pairwise_plc(maps: Sequence[np.ndarray]) -> float:
    """Mean argmax L1 distance over all unordered map pairs."""
    def one(a, b):
        ra, ca = argmax_cell(a)
        rb, cb = argmax_cell(b)
        return abs(ra - rb) + abs(ca - cb)

    return _pair_mean(maps, one)


def pairwise_palc(maps: Sequence[np.ndarray]) -> float:
    """Mean binarized-IoU complement over all unordered map pairs."""
    from protoscope.metrics.change import palc

    return _pair_mean(maps, palc)


# ---------------------------------------------------------------------------
# Cosine-distance set metrics
# ---------------------------------------------------------------------------

def _unit_rows(vectors: np.ndarray, where: str) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ShapeError(f"{where}: expected a nonempty (m, D) array, got {arr.shape}")
    norms = np.linalg.norm(arr, axis=1)
    if np.any(norms == 0):
        raise ValidationError(f"{where}: zero vector has no direction")
    return arr / norms[:, None]


def mean_cosine_distance_inter(
    sets: Sequence[np.ndarray], ids: Sequence[Sequence[int]] | None = None
) -> float:
    """Triple mean of 1 - cos over (class, member, non-class member).

    ``sets[k]`` holds class k's vectors.  When ``ids`` is given (prototype
    sets), the complement for class k excludes any member whose id belongs to
    class k, so a prototype shared between classes never measures against
    itself; without ids (feature sets) the complement is simply every other
    class's members.
    """
    if len(sets) < 2:
        raise ValidationError(f"need at least two classes, got {len(sets)}")
    units = [_unit_rows(s, f"class {k}") for k, s in enumerate(sets)]
    if ids is not None:
        if len(ids) != len(sets) or any(len(i) != u.shape[0] for i, u in zip(ids, units)):
            raise ValidationError("ids must mirror the class sets one to one")
    class_means = []
    for k, members in enumerate(units):
        if ids is None:
            others = np.concatenate([units[j] for j in range(len(units)) if j != k])
        else:
            own = set(ids[k])
            rows = [
                units[j][i]
                for j in range(len(units))
                if j != k
                for i in range(units[j].shape[0])
                if ids[j][i] not in own
            ]
            if not rows:
                raise ValidationError(f"class {k}: no non-class member to compare against")
            others = np.vstack(rows)
        dist = 1.0 - members @ others.T          # (m_k, m_rest)
        class_means.append(float(dist.mean(axis=1).mean()))
    return float(np.mean(class_means))


def mean_cosine_distance_intra(
    sets: Sequence[np.ndarray],
) -> tuple[float, list[int]]:
    """Within-class analog: mean 1 - cos of each member to its classmates.

    Classes with a single member cannot form a pair; they are skipped and
    reported in the second return value rather than polluting the mean.
    """
    if len(sets) == 0:
        raise ValidationError("need at least one class")
    class_means = []
    skipped: list[int] = []
    for k, vectors in enumerate(sets):
        unit = _unit_rows(vectors, f"class {k}")
        m = unit.shape[0]
        if m < 2:
            skipped.append(k)
            continue
        cos = unit @ unit.T
        dist = 1.0 - cos
        # Mean over j != i for each member, then over members.
        member_means = (dist.sum(axis=1)) / (m - 1)
        class_means.append(float(member_means.mean()))
    if not class_means:
        raise DegenerateSeriesError("every class is a singleton; no within-class pair exists")
    return float(np.mean(class_means)), skipped


def activation_entropy(score_series: np.ndarray, bins: int = ENTROPY_BINS) -> float:
    """Shannon entropy (nats) of a prototype's max-normalized score histogram.

    The series is divided by its maximum, binned into ``bins`` equal-width
    bins on [0, 1] (the last bin right-closed), and 0 * log 0 counts as 0.
    Bounded by log(bins).
    """
    s = np.asarray(score_series, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ShapeError(f"score series must be a nonempty vector, got shape {s.shape}")
    if bins < 2:
        raise ValidationError(f"bins must be >= 2, got {bins}")
    top = s.max()
    if top <= 0:
        raise DegenerateSeriesError("score series has no positive value")
    normalized = np.clip(s / top, 0.0, 1.0)
    counts, _ = np.histogram(normalized, bins=bins, range=(0.0, 1.0))
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())
