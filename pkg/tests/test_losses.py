import math

import numpy as np
import pytest
from helpers import brute_force_min_cost, iou_center_size, random_box

from radq import losses
from radq import tensor as T
from radq.decoder import DecoderOutput
from radq.errors import DataError
from radq.losses import (
    FocalParams,
    LossWeights,
    MatchAssignment,
    bbox_loss,
    default_focal_params,
    focal_loss,
    giou_loss,
    hungarian_match,
    matching_cost_matrix,
    total_loss,
    view_slice,
)
from radq.raddata import Box3D, GroundTruthObject, project_box
from radq.tensor import GradTape, Tensor, grad_check


class TestHungarian:
    def test_diagonal_identity(self):
        cost = np.ones((3, 3))
        np.fill_diagonal(cost, 0.0)
        match = hungarian_match(cost)
        assert match.pairs == ((0, 0), (1, 1), (2, 2))
        assert match.total_cost == 0.0

    def test_two_by_two_hand_case(self):
        match = hungarian_match(np.array([[1.0, 2.0], [3.0, 1.0]]))
        assert match.pairs == ((0, 0), (1, 1))
        assert match.total_cost == 2.0

    def test_matches_brute_force_on_random_matrices(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            m = int(rng.integers(1, 8))
            g = int(rng.integers(1, min(m, 5) + 1))
            cost = rng.uniform(0.0, 10.0, size=(m, g))
            assert hungarian_match(cost).total_cost == brute_force_min_cost(cost)

    def test_injective_both_coordinates(self):
        rng = np.random.default_rng(1)
        cost = rng.uniform(size=(6, 4))
        match = hungarian_match(cost)
        qs = [q for q, _ in match.pairs]
        gs = [g for _, g in match.pairs]
        assert len(set(qs)) == len(qs) == 4
        assert gs == [0, 1, 2, 3]

    def test_all_equal_costs_lexicographic_tie_break(self):
        match = hungarian_match(np.zeros((4, 3)))
        assert match.pairs == ((0, 0), (1, 1), (2, 2))
        match = hungarian_match(np.full((3, 2), 7.0))
        assert match.pairs == ((0, 0), (1, 1))

    def test_crafted_tie_prefers_smaller_query(self):
        # queries 0 and 2 both give total 1; lexicographic pick is query 0
        cost = np.array([[1.0], [5.0], [1.0]])
        assert hungarian_match(cost).pairs == ((0, 0),)

    def test_scaling_invariance(self):
        rng = np.random.default_rng(2)
        for c in (0.25, 3.5):
            cost = rng.uniform(0.0, 10.0, size=(7, 5))
            base = hungarian_match(cost)
            scaled = hungarian_match(cost * c)
            assert scaled.total_cost == brute_force_min_cost(cost * c)
            assert set(scaled.pairs) == set(base.pairs)
            assert abs(scaled.total_cost / c - base.total_cost) < 1e-9

    def test_empty_ground_truth(self):
        match = hungarian_match(np.zeros((5, 0)))
        assert match.pairs == () and match.total_cost == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            hungarian_match(np.array([[np.nan, 1.0], [1.0, 2.0]]))

    def test_more_gts_than_queries_rejected(self):
        with pytest.raises(DataError):
            hungarian_match(np.zeros((2, 3)))


class TestGiou:
    def test_identical_boxes_zero(self):
        box = np.array([0.5, 0.5, 1.0, 1.0])
        assert abs(float(giou_loss(box, box).data)) < 1e-12

    def test_disjoint_corner_boxes(self):
        # unit boxes at (0..1)^2 and (2..3)^2: IoU 0, enclosing area 9, union 2
        p = np.array([0.5, 0.5, 1.0, 1.0])
        g = np.array([2.5, 2.5, 1.0, 1.0])
        expected = 1.0 + 7.0 / 9.0
        assert abs(float(giou_loss(p, g).data) - expected) < 1e-4

    def test_concentric_containment(self):
        # 4x4 containing 2x2: IoU 1/4, enclosing box equals the outer box
        p = np.array([0.0, 0.0, 4.0, 4.0])
        g = np.array([0.0, 0.0, 2.0, 2.0])
        assert abs(float(giou_loss(p, g).data) - 0.75) < 1e-4

    @pytest.mark.parametrize("k", [2, 3])
    def test_random_properties(self, k):
        rng = np.random.default_rng(k)
        for _ in range(500):
            p, g = random_box(rng, k), random_box(rng, k)
            loss = float(giou_loss(p, g).data)
            assert 0.0 <= loss < 2.0
            assert abs(loss - float(giou_loss(g, p).data)) < 1e-12
            assert loss >= 1.0 - iou_center_size(p, g) - 1e-12

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            giou_loss(np.array([0.5, 0.5, 0.0, 1.0]), np.array([0.5, 0.5, 1.0, 1.0]))

    def test_gradient(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            g = Tensor(random_box(rng, 3))
            p0 = random_box(rng, 3)
            assert grad_check(lambda t: giou_loss(t, g), Tensor(p0)) <= 1e-4


class TestBboxLoss:
    def test_exact_match_zero(self):
        box = np.array([0.4, 0.6, 0.5, 0.1, 0.2, 0.3])
        assert abs(float(bbox_loss(box, box).data)) < 1e-12

    def test_pure_l1_when_giou_weight_zero(self):
        w = LossWeights(beta_giou=0.0, beta_l1=1.0)
        p = np.array([0.5, 0.5, 0.2, 0.2])
        g = np.array([0.4, 0.7, 0.1, 0.25])
        expected = abs(0.1) + abs(-0.2) + abs(0.1) + abs(-0.05)
        assert abs(float(bbox_loss(p, g, w).data) - expected) < 1e-12

    def test_default_weights_concentric_case(self):
        # normalized concentric squares 0.4 vs 0.2: GIoU loss 0.75, L1 0.4
        p = np.array([0.5, 0.5, 0.4, 0.4])
        g = np.array([0.5, 0.5, 0.2, 0.2])
        expected = 5.0 * 0.75 + 5.0 * 0.4
        assert abs(float(bbox_loss(p, g).data) - expected) < 1e-6


class TestFocalLoss:
    def _fp(self, gamma=2.0, alpha=(1.0, 1.0)):
        return FocalParams(gamma, alpha)

    def test_certain_prediction_zero(self):
        probs = np.array([1.0, 0.0])
        assert float(focal_loss(probs, 0, self._fp()).data) == 0.0

    def test_reduces_to_cross_entropy(self):
        probs = np.array([0.5, 0.5])
        out = float(focal_loss(probs, 0, self._fp(gamma=0.0)).data)
        assert abs(out - math.log(2.0)) < 1e-12

    def test_hand_case(self):
        probs = np.array([0.9, 0.1])
        fp = FocalParams(2.0, (0.25, 0.75))
        out = float(focal_loss(probs, 0, fp).data)
        assert abs(out - 0.25 * 0.01 * (-math.log(0.9))) < 1e-8
        assert abs(out - 2.6341e-4) < 1e-7

    def test_unnormalized_rejected(self):
        with pytest.raises(ValueError):
            focal_loss(np.array([0.5, 0.6]), 0, self._fp())

    def test_gradient_through_softmax(self):
        rng = np.random.default_rng(6)
        fp = default_focal_params(3)
        for _ in range(100):
            logits = rng.normal(size=4)
            f = lambda t: focal_loss(T.softmax(t, axis=0), 1, fp)
            assert grad_check(f, Tensor(logits)) <= 1e-4


def _output(logits, boxes):
    return DecoderOutput([Tensor(np.asarray(l, dtype=np.float64)) for l in logits],
                         [Tensor(np.asarray(b, dtype=np.float64)) for b in boxes], [])


def _gt(class_id, center, size):
    return GroundTruthObject(class_id, Box3D(center, size))


class TestViewSlice:
    def test_matches_projection(self):
        rng = np.random.default_rng(7)
        boxes = np.stack([random_box(rng, 3) for _ in range(4)])
        boxes = np.clip(boxes, 0.05, 0.95)
        for view in ("ra", "rd"):
            sliced = view_slice(Tensor(boxes), view).data
            for row, flat in zip(boxes, sliced):
                b = Box3D(tuple(row[:3]), tuple(row[3:]))
                assert np.allclose(flat, project_box(b, view).as_vector())


class TestTotalLoss:
    def test_empty_ground_truth_confident_background(self):
        logits = [[[-9.0, -9.0, 20.0]] * 4]
        boxes = [[[0.5] * 6] * 4]
        loss, terms, _ = total_loss(_output(logits, boxes), [])
        assert float(loss.data) < 1e-4
        assert terms["bbox_rad"] == 0.0

    def test_perfect_prediction_near_zero(self):
        gt = _gt(1, (0.5, 0.5, 0.5), (0.2, 0.2, 0.2))
        logits = [[[-9.0, 20.0, -9.0], [-9.0, -9.0, 20.0]]]
        boxes = [[[0.5, 0.5, 0.5, 0.2, 0.2, 0.2], [0.3, 0.3, 0.3, 0.1, 0.1, 0.1]]]
        loss, terms, assigns = total_loss(_output(logits, boxes), [gt])
        assert assigns[0].pairs == ((0, 0),)
        assert terms["bbox_rad"] < 1e-9
        assert float(loss.data) < 1e-4

    def test_two_query_one_object_frozen_oracle(self):
        """Value frozen from an independent numpy computation (kept below)."""
        logits = [[[2.0, 0.5, 0.1], [0.2, 0.3, 3.0]]]
        boxes = [[[0.5, 0.5, 0.5, 0.2, 0.2, 0.2], [0.3, 0.7, 0.4, 0.1, 0.1, 0.2]]]
        gt = _gt(0, (0.45, 0.55, 0.5), (0.25, 0.15, 0.25))
        loss, _, assigns = total_loss(_output(logits, boxes), [gt])

        # independent scalar computation
        def softmax(v):
            e = np.exp(v - np.max(v))
            return e / e.sum()

        p0, p1 = softmax(np.array(logits[0][0])), softmax(np.array(logits[0][1]))
        pb = np.array(boxes[0][0])
        gb = np.array([0.45, 0.55, 0.5, 0.25, 0.15, 0.25])

        def giou_1d(p, g):
            k = len(p) // 2
            lo = np.maximum(p[:k] - p[k:] / 2, g[:k] - g[k:] / 2)
            hi = np.minimum(p[:k] + p[k:] / 2, g[:k] + g[k:] / 2)
            inter = np.clip(hi - lo, 0, None).prod()
            union = p[k:].prod() + g[k:].prod() - inter
            enc = (np.maximum(p[:k] + p[k:] / 2, g[:k] + g[k:] / 2)
                   - np.minimum(p[:k] - p[k:] / 2, g[:k] - g[k:] / 2)).prod()
            return 1 - inter / union + (enc - union) / enc

        def view(v, idx):
            return v[list(idx)]

        def bbox(p, g):
            return 5.0 * giou_1d(p, g) + 5.0 * np.abs(p - g).sum()

        # query 0 must win the match (closer box, matching class)
        assert assigns[0].pairs == ((0, 0),)
        l_rad = bbox(pb, gb)
        l_ra = bbox(view(pb, (0, 1, 3, 4)), view(gb, (0, 1, 3, 4)))
        l_rd = bbox(view(pb, (0, 2, 3, 5)), view(gb, (0, 2, 3, 5)))
        focal0 = -0.25 * (1 - p0[0]) ** 2 * np.log(p0[0])
        focal1 = -0.75 * (1 - p1[2]) ** 2 * np.log(p1[2])
        l_cls = (focal0 + focal1) / 2
        expected = 40.0 * l_rad + 15.0 * l_ra + 15.0 * l_rd + 10.0 * l_cls
        assert abs(float(loss.data) - expected) < 1e-9
        assert abs(expected - 331.4526304041867) < 1e-9  # frozen oracle value

    def test_ground_truth_permutation_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            m, g = 6, 3
            logits = [rng.normal(size=(m, 4))]
            boxes = [rng.uniform(0.2, 0.8, size=(m, 6))]
            gts = [
                _gt(int(rng.integers(0, 3)), tuple(rng.uniform(0.3, 0.7, 3)),
                    tuple(rng.uniform(0.05, 0.2, 3)))
                for _ in range(g)
            ]
            base, _, _ = total_loss(_output(logits, boxes), gts)
            perm = [gts[i] for i in rng.permutation(g)]
            shuffled, _, _ = total_loss(_output(logits, boxes), perm)
            assert abs(float(base.data) - float(shuffled.data)) <= 1e-9

    def test_too_many_objects_rejected(self):
        rng = np.random.default_rng(9)
        logits = [rng.normal(size=(2, 4))]
        boxes = [rng.uniform(0.2, 0.8, size=(2, 6))]
        gts = [_gt(0, (0.5, 0.5, 0.5), (0.1, 0.1, 0.1))] * 3
        with pytest.raises(DataError):
            total_loss(_output(logits, boxes), gts)

    def test_layer_averaging(self):
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(3, 4))
        boxes = rng.uniform(0.2, 0.8, size=(3, 6))
        gts = [_gt(1, (0.5, 0.5, 0.5), (0.2, 0.2, 0.2))]
        single, _, _ = total_loss(_output([logits], [boxes]), gts)
        double, _, _ = total_loss(_output([logits, logits], [boxes, boxes]), gts)
        assert abs(float(single.data) - float(double.data)) < 1e-12

    def test_gradient_wrt_boxes_fixed_assignment(self):
        rng = np.random.default_rng(11)
        logits = Tensor(rng.normal(size=(3, 4)))
        boxes0 = rng.uniform(0.3, 0.7, size=(3, 6))
        gts = [
            _gt(0, (0.4, 0.5, 0.5), (0.2, 0.2, 0.2)),
            _gt(2, (0.6, 0.6, 0.4), (0.1, 0.15, 0.2)),
        ]
        _, _, assigns = total_loss(_output([logits.data], [boxes0]), gts)

        def f(t):
            out = DecoderOutput([logits], [t], [])
            loss, _, _ = total_loss(out, gts, assignments=assigns)
            return loss

        assert grad_check(f, Tensor(boxes0)) <= 1e-4

    def test_gradient_wrt_logits(self):
        rng = np.random.default_rng(12)
        boxes = Tensor(rng.uniform(0.3, 0.7, size=(3, 6)))
        gts = [_gt(1, (0.4, 0.5, 0.5), (0.2, 0.2, 0.2))]
        logits0 = rng.normal(size=(3, 4))
        _, _, assigns = total_loss(_output([logits0], [boxes.data]), gts)

        def f(t):
            out = DecoderOutput([t], [boxes], [])
            loss, _, _ = total_loss(out, gts, assignments=assigns)
            return loss

        assert grad_check(f, Tensor(logits0)) <= 1e-4

    def test_cost_matrix_consistent_with_pairwise_losses(self):
        rng = np.random.default_rng(13)
        m, g = 4, 2
        probs = np.abs(rng.normal(size=(m, 4)))
        probs /= probs.sum(axis=1, keepdims=True)
        boxes = rng.uniform(0.3, 0.7, size=(m, 6))
        gt_boxes = rng.uniform(0.3, 0.7, size=(g, 6))
        gt_classes = np.array([0, 2])
        w = LossWeights()
        cost = matching_cost_matrix(probs, boxes, gt_classes, gt_boxes, w)
        for i in range(m):
            for j in range(g):
                expected = (
                    w.beta4 * (1.0 - probs[i, gt_classes[j]])
                    + w.beta_l1 * np.abs(boxes[i] - gt_boxes[j]).sum()
                    + w.beta_giou * float(giou_loss(boxes[i], gt_boxes[j]).data)
                )
                assert abs(cost[i, j] - expected) < 1e-10
