"""Dataset split procedures.

Two strategies:

* :func:`stratified_splits` — a stratified 70/30 test split followed by a
  stratified 4-fold cross-validation of the remainder (so each fold trains
  on 52.5 % and validates on 17.5 % of the data);
* :func:`hsv_context_split` — a background-context split that clusters each
  class by a hue/saturation border histogram and sends the smaller cluster
  to the test side, falling back to a stratified random split for classes
  whose histograms are indistinguishable.

Both are deterministic functions of their seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from protoscope.errors import ValidationError
from protoscope.perturb import rgb_to_hsv

#: minimum class size able to survive a 30% test cut plus 4 folds.
MIN_CLASS_SIZE = 8


@dataclass
class FoldSplit:
    train: list[int]
    val: list[int]


@dataclass
class SplitResult:
    test: list[int]
    folds: list[FoldSplit]


@dataclass
class ContextSplitResult:
    trainval: list[int]
    test: list[int]
    #: classes whose histograms were indistinguishable (random fallback used)
    fallback_classes: list[int] = field(default_factory=list)


def _class_indices(labels: np.ndarray) -> dict[int, np.ndarray]:
    classes = sorted(set(int(c) for c in labels))
    if len(classes) < 2:
        raise ValidationError(f"need at least 2 classes, got {len(classes)}")
    return {c: np.flatnonzero(labels == c) for c in classes}


def stratified_splits(
    labels, seed: int = 0, test_fraction: float = 0.3, fold_count: int = 4
) -> SplitResult:
    """Stratified test cut plus stratified K-fold split of the remainder.

    Per class, ``round(test_fraction * n)`` samples go to the test side and
    the rest are dealt into ``fold_count`` near-equal folds; fold i of the
    result validates on fold i and trains on the others.  Deterministic for
    a given seed; per-class proportions match the global ones within one
    sample.
    """
    y = np.asarray(labels, dtype=np.int64)
    if y.ndim != 1 or y.size == 0:
        raise ValidationError("labels must be a nonempty 1-D sequence")
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test fraction must be in (0, 1), got {test_fraction}")
    if fold_count < 2:
        raise ValidationError(f"need at least 2 folds, got {fold_count}")
    groups = _class_indices(y)
    for c, idx in groups.items():
        if idx.size < MIN_CLASS_SIZE:
            raise ValidationError(
                f"class {c} has {idx.size} samples; needs >= {MIN_CLASS_SIZE}"
            )
    rng = np.random.default_rng(seed)
    test: list[int] = []
    fold_members: list[list[int]] = [[] for _ in range(fold_count)]
    for c in sorted(groups):
        order = groups[c][rng.permutation(groups[c].size)]
        n_test = int(order.size * test_fraction + 0.5)
        test.extend(int(i) for i in order[:n_test])
        rest = order[n_test:]
        base, extra = divmod(rest.size, fold_count)
        pos = 0
        for f in range(fold_count):
            size = base + (1 if f < extra else 0)
            fold_members[f].extend(int(i) for i in rest[pos : pos + size])
            pos += size
    folds = []
    for f in range(fold_count):
        val = sorted(fold_members[f])
        train = sorted(i for g in range(fold_count) if g != f for i in fold_members[g])
        folds.append(FoldSplit(train=train, val=val))
    return SplitResult(test=sorted(test), folds=folds)


# ---------------------------------------------------------------------------
# Background-context split
# ---------------------------------------------------------------------------

def border_hs_histogram(image: np.ndarray, bins: int = 8, border: float = 0.2) -> np.ndarray:
    """Normalized hue x saturation histogram of a 20%-wide border frame.

    The border frame approximates the image background without needing a
    segmentation mask.  Returns a flattened (bins*bins,) distribution.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"image must be (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    dr = max(1, int(np.ceil(h * border)))
    dc = max(1, int(np.ceil(w * border)))
    frame = np.ones((h, w), dtype=bool)
    if 2 * dr < h and 2 * dc < w:
        frame[dr : h - dr, dc : w - dc] = False
    hsv = rgb_to_hsv(img)
    hue = hsv[..., 0][frame]
    sat = hsv[..., 1][frame]
    hist, _, _ = np.histogram2d(hue, sat, bins=bins, range=[[0, 1], [0, 1]])
    return (hist / hist.sum()).ravel()


def _kmeans2(points: np.ndarray, rng: np.random.Generator, restarts: int = 20):
    """Seeded 2-means with restarts; returns the best labeling by inertia."""
    n = points.shape[0]
    best_labels = None
    best_inertia = np.inf
    for _ in range(restarts):
        centers = points[rng.choice(n, size=2, replace=False)]
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(100):
            d0 = ((points - centers[0]) ** 2).sum(axis=1)
            d1 = ((points - centers[1]) ** 2).sum(axis=1)
            new_labels = (d1 < d0).astype(np.int64)
            for c in (0, 1):
                members = points[new_labels == c]
                if members.shape[0] == 0:
                    # Re-seed an empty cluster with the farthest point.
                    far = int(np.argmax(np.minimum(d0, d1)))
                    new_labels[far] = c
                    members = points[new_labels == c]
                centers[c] = members.mean(axis=0)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        inertia = 0.0
        for c in (0, 1):
            members = points[labels == c]
            if members.shape[0]:
                inertia += float(((members - centers[c]) ** 2).sum())
        if inertia < best_inertia - 1e-12:
            best_inertia = inertia
            best_labels = labels.copy()
    return best_labels


def hsv_context_split(images, labels, seed: int = 0, test_fraction: float = 0.3) -> ContextSplitResult:
    """Split each class by background context into trainval vs test.

    Per class the border histograms are clustered into two groups (seeded
    2-means, 20 restarts) and the smaller group becomes the test side (ties
    keep the group holding the class's first image in trainval).  A class
    whose histograms are all identical cannot be split by context; it falls
    back to a seeded stratified random cut and is recorded as such.
    """
    y = np.asarray(labels, dtype=np.int64)
    if len(images) != y.shape[0]:
        raise ValidationError(f"{len(images)} images for {y.shape[0]} labels")
    groups = _class_indices(y)
    for c, idx in groups.items():
        if idx.size < 2:
            raise ValidationError(f"class {c} needs at least 2 images, got {idx.size}")
    result = ContextSplitResult(trainval=[], test=[])
    for c in sorted(groups):
        idx = groups[c]
        hists = np.stack([border_hs_histogram(images[i]) for i in idx])
        rng = np.random.default_rng(np.random.SeedSequence([seed, c]))
        spread = float(np.abs(hists - hists[0]).max())
        if spread == 0.0:
            # Context carries no signal; stratified random fallback.
            result.fallback_classes.append(c)
            order = idx[rng.permutation(idx.size)]
            n_test = max(1, int(idx.size * test_fraction + 0.5))
            result.test.extend(int(i) for i in order[:n_test])
            result.trainval.extend(int(i) for i in order[n_test:])
            continue
        assignment = _kmeans2(hists, rng)
        size0 = int((assignment == 0).sum())
        size1 = int((assignment == 1).sum())
        if size0 == size1:
            test_cluster = 1 - int(assignment[0])
        else:
            test_cluster = 0 if size0 < size1 else 1
        for i, a in zip(idx, assignment):
            (result.test if a == test_cluster else result.trainval).append(int(i))
    result.trainval.sort()
    result.test.sort()
    return result
