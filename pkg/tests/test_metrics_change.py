"""The nine pairwise change metrics.

Every metric gets a frozen worked example, an exact identity law (equal
inputs score zero), and a seeded oracle loop against a plain-loop
reimplementation.
"""

import numpy as np
import pytest

from protoscope.errors import (
    DegenerateOutputError,
    DegenerateSaliencyError,
    ValidationError,
)
from protoscope.metrics import change


# ---------------------------------------------------------------------------
# Oracles: simple scalar re-derivations
# ---------------------------------------------------------------------------

def box_iou_oracle(a, b):
    r0 = max(a[0], b[0])
    c0 = max(a[1], b[1])
    r1 = min(a[2], b[2])
    c1 = min(a[3], b[3])
    inter = max(0, r1 - r0) * max(0, c1 - c0)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def argmax_oracle(arr):
    best, pos = None, None
    for r in range(arr.shape[0]):
        for c in range(arr.shape[1]):
            if best is None or arr[r, c] > best:
                best, pos = arr[r, c], (r, c)
    return pos


def curve_overlap_oracle(a, b, sort):
    a = sorted(np.ravel(a), reverse=True) if sort else list(np.ravel(a))
    b = sorted(np.ravel(b), reverse=True) if sort else list(np.ravel(b))
    lo = sum(min(x, y) for x, y in zip(a, b))
    hi = sum(max(x, y) for x, y in zip(a, b))
    return 1.0 - lo / hi


def binarize_oracle(arr):
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.ones_like(arr, dtype=bool)
    return (arr - lo) / (hi - lo) > 0.5


def rank_oracle(values, index):
    v = values[index]
    rank = 1
    for i, other in enumerate(values):
        if other > v or (other == v and i < index):
            rank += 1
    return rank


def _random_pair(rng, low=0.0, high=5.0):
    h, w = rng.integers(1, 7, size=2)
    a = rng.uniform(low, high, size=(h, w))
    b = rng.uniform(low, high, size=(h, w))
    return a, b


# ---------------------------------------------------------------------------
# Location change of the saliency box
# ---------------------------------------------------------------------------

class TestVlc:
    def test_frozen_example(self):
        assert change.vlc((0, 0, 2, 2), (0, 1, 2, 3)) == pytest.approx(2.0 / 3.0)

    def test_identity_is_exact_zero(self):
        assert change.vlc((1, 2, 5, 7), (1, 2, 5, 7)) == 0.0

    def test_disjoint_boxes_score_one(self):
        assert change.vlc((0, 0, 2, 2), (4, 4, 6, 6)) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(40):
            r0, c0 = rng.integers(0, 5, size=2)
            box_a = (r0, c0, r0 + rng.integers(1, 5), c0 + rng.integers(1, 5))
            r0, c0 = rng.integers(0, 5, size=2)
            box_b = (r0, c0, r0 + rng.integers(1, 5), c0 + rng.integers(1, 5))
            assert change.vlc(box_a, box_b) == change.vlc(box_b, box_a)
            assert change.vlc(box_a, box_b) == pytest.approx(
                1.0 - box_iou_oracle(box_a, box_b), abs=1e-12
            )

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValidationError):
            change.vlc((0, 0, 0, 2), (0, 0, 1, 1))


class TestPsc:
    def test_relative_change(self):
        assert change.psc(2.0, 1.5) == pytest.approx(0.25)

    def test_identity_zero(self):
        assert change.psc(3.7, 3.7) == 0.0

    def test_reference_must_be_positive(self):
        for bad in (0.0, -1.0):
            with pytest.raises(ValidationError):
                change.psc(bad, 1.0)


class TestVac:
    def test_frozen_example(self):
        assert change.vac(np.array([2.0, 1.0]), np.array([1.0, 1.0])) == pytest.approx(1.0 / 3.0)

    def test_identity_zero(self):
        a = np.random.default_rng(2).uniform(size=(4, 4))
        assert change.vac(a, a.copy()) == 0.0

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(size=12)
        b = rng.permutation(a)
        assert change.vac(a, b) == 0.0

    def test_oracle_agreement(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            a, b = _random_pair(rng, 0.0, 5.0)
            assert change.vac(a, b) == pytest.approx(
                curve_overlap_oracle(a, b, sort=True), abs=1e-12
            )

    def test_rejects_negative_relevance(self):
        with pytest.raises(ValidationError):
            change.vac(np.array([1.0, -0.1]), np.array([1.0, 0.0]))

    def test_both_zero_is_degenerate(self):
        with pytest.raises(DegenerateSaliencyError):
            change.vac(np.zeros(4), np.zeros(4))


class TestPlc:
    def test_l1_distance_of_peaks(self):
        a = np.zeros((4, 4))
        a[0, 0] = 1.0
        b = np.zeros((4, 4))
        b[3, 2] = 1.0
        assert change.plc(a, b) == 5.0

    def test_identity_zero(self):
        a = np.random.default_rng(5).uniform(size=(5, 3))
        assert change.plc(a, a.copy()) == 0.0

    def test_tie_resolves_row_major(self):
        a = np.zeros((3, 3))
        a[1, 1] = a[2, 2] = 7.0  # first in row-major order wins
        assert change.argmax_cell(a) == (1, 1)

    def test_oracle_agreement(self):
        rng = np.random.default_rng(6)
        for _ in range(60):
            a, b = _random_pair(rng)
            (ra, ca), (rb, cb) = argmax_oracle(a), argmax_oracle(b)
            want = abs(ra - rb) + abs(ca - cb)
            assert change.plc(a, b) == want

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            change.plc(np.zeros((2, 2)), np.zeros((3, 3)))


class TestPalc:
    def test_identity_zero(self):
        a = np.random.default_rng(7).uniform(size=(4, 5))
        assert change.palc(a, a.copy()) == 0.0

    def test_oracle_agreement(self):
        rng = np.random.default_rng(8)
        for _ in range(60):
            a, b = _random_pair(rng)
            ba, bb = binarize_oracle(a), binarize_oracle(b)
            union = np.logical_or(ba, bb).sum()
            inter = np.logical_and(ba, bb).sum()
            assert change.palc(a, b) == pytest.approx(1.0 - inter / union, abs=1e-12)

    def test_constant_maps_binarize_to_full_overlap(self):
        a = np.full((3, 3), 2.0)
        b = np.full((3, 3), 9.0)
        assert change.palc(a, b) == 0.0


class TestPac:
    def test_frozen_example(self):
        assert change.pac(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0

    def test_not_permutation_invariant_unlike_vac(self):
        # the elementwise variant must notice a pure relocation of mass;
        # the sorted variant deliberately must not — keep them distinct
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        assert change.pac(a, b) == 1.0
        assert change.vac(a, b) == 0.0

    def test_identity_zero(self):
        a = np.random.default_rng(9).uniform(size=(6, 2))
        assert change.pac(a, a.copy()) == 0.0

    def test_oracle_agreement(self):
        rng = np.random.default_rng(10)
        for _ in range(60):
            a, b = _random_pair(rng, 0.0, 3.0)
            assert change.pac(a, b) == pytest.approx(
                curve_overlap_oracle(a, b, sort=False), abs=1e-12
            )


class TestPrc:
    def test_rank_change(self):
        a = np.array([9.0, 5.0, 7.0])
        b = np.array([5.0, 9.0, 7.0])
        # prototype 0: rank 1 before, rank 3 after
        assert change.prc(a, b, 0) == 2.0

    def test_identity_zero(self):
        s = np.array([3.0, 1.0, 2.0])
        for i in range(3):
            assert change.prc(s, s.copy(), i) == 0.0

    def test_tie_rank_goes_to_lower_index(self):
        s = np.array([5.0, 5.0, 1.0])
        assert change.descending_rank(s, 0) == 1
        assert change.descending_rank(s, 1) == 2

    def test_oracle_agreement(self):
        rng = np.random.default_rng(11)
        for _ in range(60):
            n = int(rng.integers(1, 9))
            a = rng.uniform(size=n)
            b = rng.uniform(size=n)
            i = int(rng.integers(0, n))
            want = abs(rank_oracle(a, i) - rank_oracle(b, i))
            assert change.prc(a, b, i) == want

    def test_prototype_index_validated(self):
        with pytest.raises(ValidationError):
            change.prc(np.ones(3), np.ones(3), 3)


class TestCac:
    def test_frozen_example(self):
        assert change.cac(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 1.0

    def test_identity_zero(self):
        o = np.array([2.0, 0.5, 1.0])
        assert change.cac(o, o.copy()) == 0.0

    def test_negative_logit_rejected(self):
        with pytest.raises(ValidationError):
            change.cac(np.array([1.0, -0.1]), np.array([1.0, 0.0]))

    def test_both_zero_is_degenerate(self):
        with pytest.raises(DegenerateOutputError):
            change.cac(np.zeros(3), np.zeros(3))

    def test_oracle_agreement(self):
        rng = np.random.default_rng(12)
        for _ in range(60):
            k = int(rng.integers(1, 6))
            a = rng.uniform(0.0, 4.0, size=k)
            b = rng.uniform(0.0, 4.0, size=k)
            assert change.cac(a, b) == pytest.approx(
                curve_overlap_oracle(a, b, sort=False), abs=1e-12
            )


class TestCrc:
    def test_rank_change_of_predicted_class(self):
        a = np.array([9.0, 5.0, 7.0])  # predicts class 0
        b = np.array([5.0, 9.0, 7.0])  # class 0 drops to rank 3
        assert change.crc(a, b) == 2.0

    def test_identity_zero(self):
        o = np.array([1.0, 3.0, 2.0])
        assert change.crc(o, o.copy()) == 0.0

    def test_prediction_comes_from_first_output(self):
        a = np.array([1.0, 9.0])
        b = np.array([9.0, 1.0])
        # predicted class is argmax(a) = 1; in b it ranks second
        assert change.crc(a, b) == 1.0

    def test_oracle_agreement(self):
        rng = np.random.default_rng(13)
        for _ in range(60):
            k = int(rng.integers(1, 6))
            a = rng.uniform(size=k)
            b = rng.uniform(size=k)
            j = int(np.argmax(a))
            want = abs(rank_oracle(a, j) - rank_oracle(b, j))
            assert change.crc(a, b) == want
