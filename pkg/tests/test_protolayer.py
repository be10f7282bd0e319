"""Model math: similarity, heads, projection, and training losses."""

import math

import numpy as np
import pytest

from protoscope import protolayer as pl
from protoscope.errors import ShapeError, ValidationError
from protoscope.interchange import ModelBundle


class TestLogRatioSimilarity:
    def test_frozen_values(self):
        assert pl.log_ratio_similarity(0.0, 1e-4) == pytest.approx(9.21034, abs=5e-6)
        assert pl.log_ratio_similarity(1.0, 1e-4) == pytest.approx(0.69305, abs=5e-6)
        assert pl.log_ratio_similarity(0.0, 1e-2) == pytest.approx(math.log(100.0), abs=1e-9)

    def test_zero_distance_equals_log_inverse_epsilon(self):
        for eps in (1e-4, 1e-2, 0.5):
            assert pl.log_ratio_similarity(0.0, eps) == pytest.approx(
                math.log(1.0 / eps), abs=1e-9
            )

    def test_strictly_decreasing(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(0, 1e4, size=1000)
        b = a + rng.uniform(1e-6, 10.0, size=1000)
        assert np.all(pl.log_ratio_similarity(a) > pl.log_ratio_similarity(b))

    def test_rejects_negative_distance(self):
        with pytest.raises(ValidationError):
            pl.log_ratio_similarity(-0.1)

    def test_rejects_bad_epsilon(self):
        for eps in (0.0, 1.0, -0.5):
            with pytest.raises(ValidationError):
                pl.log_ratio_similarity(1.0, eps)


class TestScores:
    def test_max_pool(self):
        assert pl.max_pool_score(np.array([[0.1, 0.9], [0.3, 0.2]])) == 0.9

    def test_focal_is_max_minus_mean(self):
        assert pl.focal_similarity(np.array([[0.0, 1.0], [2.0, 5.0]])) == 3.0

    def test_focal_zero_for_constant_map(self):
        assert pl.focal_similarity(np.full((3, 3), 0.4)) == 0.0

    def test_slot_aggregate(self):
        assert pl.slot_aggregate(np.array([0.2, 0.8]), np.array([1.0, 2.0])) == pytest.approx(1.8)

    def test_slot_aggregate_rejects_unnormalized(self):
        with pytest.raises(ValidationError):
            pl.slot_aggregate(np.array([0.2, 0.2]), np.array([1.0, 2.0]))
        with pytest.raises(ValidationError):
            pl.slot_aggregate(np.array([-0.5, 1.5]), np.array([1.0, 2.0]))


class TestIndirectHead:
    def test_softmax_maps_sum_to_one(self):
        rng = np.random.default_rng(4)
        maps = pl.pipnet_prototype_maps(rng.normal(size=(5, 4, 7)) * 50)
        np.testing.assert_allclose(maps.sum(axis=0), 1.0, atol=1e-6)

    def test_softmax_is_stable_for_large_inputs(self):
        fm = np.zeros((1, 1, 3))
        fm[0, 0] = [1e4, -1e4, 0.0]
        maps = pl.pipnet_prototype_maps(fm)
        assert np.all(np.isfinite(maps))
        assert maps[0, 0, 0] == pytest.approx(1.0)

    def test_unit_contribution_frozen_values(self):
        assert pl.pipnet_output(1.0, 1.0) == pytest.approx(math.log(2.0), abs=1e-12)
        assert pl.pipnet_output(6.0, 1.0) == pytest.approx(math.log(37.0), abs=1e-12)

    def test_negative_weight_rejected(self):
        with pytest.raises(ValidationError):
            pl.pipnet_output(1.0, -0.5)
        with pytest.raises(ValidationError):
            pl.classify_indirect(np.ones(2), np.array([[0.5, -0.1]]))

    def test_classify_indirect_matches_unit_sum(self):
        rng = np.random.default_rng(6)
        s = rng.uniform(0, 2, size=4)
        w = rng.uniform(0, 2, size=(3, 4))
        out = pl.classify_indirect(s, w)
        want = [sum(pl.pipnet_output(s[m], w[k, m]) for m in range(4)) for k in range(3)]
        np.testing.assert_allclose(out, want, atol=1e-12)


class TestClassifyHeads:
    def test_dense_head_is_matrix_product(self):
        rng = np.random.default_rng(7)
        s, w = rng.normal(size=5), rng.normal(size=(3, 5))
        np.testing.assert_allclose(pl.classify(s, w), w @ s)

    def test_slotted_head_rowwise(self):
        g = np.array([[1.0, 2.0], [3.0, 4.0]])
        w = np.array([[0.5, 0.5], [1.0, 0.0]])
        np.testing.assert_allclose(pl.classify_slotted(g, w), [1.5, 3.0])

    def test_presence_matrix_sums_slots(self):
        sa = np.zeros((2, 2, 3))
        sa[0, 0] = [1.0, 0.0, 0.0]
        sa[0, 1] = [0.0, 1.0, 0.0]
        sa[1, 0] = [0.5, 0.5, 0.0]
        sa[1, 1] = [0.0, 0.0, 1.0]
        np.testing.assert_allclose(
            pl.presence_matrix(sa), [[1.0, 1.0, 0.0], [0.5, 0.5, 1.0]]
        )


class TestForwardArtifacts:
    def test_scores_equal_map_maxima(self):
        rng = np.random.default_rng(11)
        model = ModelBundle(
            kind="explicit-class-specific",
            classifier_weights=rng.uniform(0, 1, size=(2, 4)),
            prototypes=rng.normal(size=(4, 5)),
            class_of_prototype=np.array([0, 0, 1, 1]),
        )
        maps, scores, output = pl.forward_artifacts(model, rng.normal(size=(3, 3, 5)))
        np.testing.assert_array_equal(scores, maps.reshape(4, -1).max(axis=1))
        np.testing.assert_allclose(output, model.classifier_weights @ scores)

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(12)
        model = ModelBundle(
            kind="explicit-class-specific",
            classifier_weights=rng.uniform(0, 1, size=(2, 4)),
            prototypes=rng.normal(size=(4, 5)),
            class_of_prototype=np.array([0, 0, 1, 1]),
        )
        fm = rng.normal(size=(3, 3, 5))
        a = pl.forward_artifacts(model, fm)
        b = pl.forward_artifacts(model, fm.copy())
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestProjection:
    def test_snaps_to_nearest_candidate(self):
        protos = np.array([[0.0, 0.0], [5.0, 5.0]])
        pools = [
            np.array([[1.0, 0.0], [3.0, 3.0]]),
            np.array([[1.0, 0.0], [4.0, 5.0]]),
        ]
        projected, chosen = pl.project_prototypes(protos, pools)
        np.testing.assert_array_equal(projected, [[1.0, 0.0], [4.0, 5.0]])
        assert chosen == [0, 1]

    def test_tie_resolves_to_lowest_index(self):
        protos = np.array([[0.0]])
        pools = [np.array([[1.0], [-1.0]])]  # equidistant
        _, chosen = pl.project_prototypes(protos, pools)
        assert chosen == [0]

    def test_idempotent(self):
        rng = np.random.default_rng(13)
        protos = rng.normal(size=(3, 4))
        pools = [rng.normal(size=(6, 4)) for _ in range(3)]
        once, _ = pl.project_prototypes(protos, pools)
        twice, _ = pl.project_prototypes(once, pools)
        np.testing.assert_array_equal(once, twice)


# ---------------------------------------------------------------------------
# Training losses
# ---------------------------------------------------------------------------

def _loss_oracle(feature_maps, label_sets, prototypes, prototype_classes, separation):
    """Plain-loop reimplementation of the assignment losses."""
    per_sample = []
    for fm, labels in zip(feature_maps, label_sets):
        cells = np.asarray(fm, dtype=np.float64).reshape(-1, np.asarray(fm).shape[-1])
        per_class = []
        for k in sorted(set(int(v) for v in labels)):
            if separation:
                idx = [i for i, c in enumerate(prototype_classes) if c != k]
            else:
                idx = [i for i, c in enumerate(prototype_classes) if c == k]
            best = min(
                float(((cells - prototypes[i]) ** 2).sum(axis=1).min()) for i in idx
            )
            per_class.append(best)
        per_sample.append(sum(per_class) / len(per_class))
    value = sum(per_sample) / len(per_sample)
    return -value if separation else value


class TestAssignmentLosses:
    def test_cluster_frozen_example(self):
        fm = np.array([[[0.0]], [[2.0]]])  # cells {0, 2} in a 1-channel map
        protos = np.array([[1.0]])
        classes = np.array([0])
        loss = pl.cluster_loss([fm], [(0,)], protos, classes)
        assert loss.value == pytest.approx(1.0, abs=1e-12)

    def test_separation_frozen_example(self):
        fm = np.array([[[0.0]], [[2.0]]])
        protos = np.array([[1.0], [5.0]])
        classes = np.array([0, 1])
        loss = pl.separation_loss([fm], [(0,)], protos, classes)
        assert loss.value == pytest.approx(-9.0, abs=1e-12)

    def test_signs(self):
        rng = np.random.default_rng(17)
        for _ in range(30):
            fms = [rng.normal(size=(2, 3, 4)) for _ in range(3)]
            protos = rng.normal(size=(6, 4))
            classes = np.array([0, 0, 1, 1, 2, 2])
            labels = [
                tuple(rng.choice(3, size=rng.integers(1, 4), replace=False)) for _ in range(3)
            ]
            assert pl.cluster_loss(fms, labels, protos, classes).value >= 0.0
            assert pl.separation_loss(fms, labels, protos, classes).value <= 0.0

    def test_multilabel_oracle_agreement(self):
        rng = np.random.default_rng(18)
        for _ in range(50):
            m = int(rng.integers(1, 5))
            k = int(rng.integers(2, 5))
            per = int(rng.integers(1, 3))
            depth = int(rng.integers(1, 5))
            protos = rng.normal(size=(k * per, depth))
            classes = np.repeat(np.arange(k), per)
            fms = [
                rng.normal(size=(rng.integers(1, 4), rng.integers(1, 4), depth))
                for _ in range(m)
            ]
            labels = [
                tuple(rng.choice(k, size=rng.integers(1, k + 1), replace=False))
                for _ in range(m)
            ]
            got = pl.cluster_loss(fms, labels, protos, classes).value
            want = _loss_oracle(fms, labels, protos, classes, separation=False)
            assert got == pytest.approx(want, abs=1e-9)
            got = pl.separation_loss(fms, labels, protos, classes).value
            want = _loss_oracle(fms, labels, protos, classes, separation=True)
            assert got == pytest.approx(want, abs=1e-9)

    def test_class_without_prototypes_rejected(self):
        fm = np.zeros((1, 1, 2))
        protos = np.zeros((1, 2))
        with pytest.raises(ValidationError):
            pl.cluster_loss([fm], [(1,)], protos, np.array([0]))

    def test_separation_needs_a_complement(self):
        fm = np.zeros((1, 1, 2))
        protos = np.zeros((2, 2))
        with pytest.raises(ValidationError):
            pl.separation_loss([fm], [(0,)], protos, np.array([0, 0]))


class TestMarginLoss:
    def test_frozen_examples(self):
        assert pl.margin_loss(np.array([0.5, 0.0]), [0]).value == pytest.approx(0.25)
        assert pl.margin_loss(np.array([0.0, 0.0]), [0]).value == pytest.approx(0.5)

    def test_zero_when_margin_satisfied(self):
        assert pl.margin_loss(np.array([3.0, 0.0, 0.5]), [0]).value == 0.0

    def test_all_labeled_means_no_pairs(self):
        assert pl.margin_loss(np.array([1.0, 2.0]), [0, 1]).value == 0.0

    def test_oracle_agreement(self):
        rng = np.random.default_rng(19)
        for _ in range(60):
            k = int(rng.integers(2, 6))
            o = rng.normal(size=k)
            size = int(rng.integers(1, k + 1))
            labels = sorted(rng.choice(k, size=size, replace=False).tolist())
            total = 0.0
            for j in labels:
                for i in range(k):
                    if i not in labels:
                        total += max(0.0, 1.0 - (o[j] - o[i]))
            assert pl.margin_loss(o, labels).value == pytest.approx(total / k, abs=1e-12)

    def test_label_out_of_range_rejected(self):
        with pytest.raises(ValidationError):
            pl.margin_loss(np.array([1.0, 2.0]), [5])


class TestOrthogonalLoss:
    def test_frozen_value(self):
        s = math.sqrt(2.0) / 2.0
        slots = np.array([[1.0, 0.0], [s, s]])
        assert pl.orthogonal_loss(slots).value == pytest.approx(0.70711, abs=5e-6)

    def test_orthogonal_rows_score_zero(self):
        assert pl.orthogonal_loss(np.eye(4)).value == pytest.approx(0.0, abs=1e-12)

    def test_identical_rows_score_one(self):
        slots = np.tile(np.array([0.3, 0.7]), (3, 1))
        assert pl.orthogonal_loss(slots).value == pytest.approx(1.0, abs=1e-12)

    def test_pair_mean(self):
        # three rows -> three unordered pairs, averaged
        slots = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        assert pl.orthogonal_loss(slots).value == pytest.approx(1.0 / 3.0, abs=1e-12)

    def test_zero_row_rejected(self):
        with pytest.raises(ValidationError):
            pl.orthogonal_loss(np.array([[0.0, 0.0], [1.0, 0.0]]))

    def test_single_row_rejected(self):
        with pytest.raises(ShapeError):
            pl.orthogonal_loss(np.array([[1.0, 0.0]]))
