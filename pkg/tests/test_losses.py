import math

import numpy as np
import pytest
import torch

from querytrack.boxes import giou
from querytrack.decoder import DecoderOutput
from querytrack.losses import (
    FOCAL_ALPHA,
    FOCAL_GAMMA,
    LossWeights,
    cal_loss,
    detection_cost,
    focal_loss,
    frame_loss,
    stage1_loss,
    tala_assign,
)
from querytrack.matching import MatchResult
from querytrack.queries import KIND_DETECT, KIND_TRACK, QuerySet


def output_from(logits, boxes, layers=1) -> DecoderOutput:
    """Stack the same per-query logits/boxes into an L-layer decoder output."""
    logits = torch.as_tensor(logits, dtype=torch.float64).reshape(1, 1, -1, 1)
    boxes = torch.as_tensor(boxes, dtype=torch.float64).reshape(1, 1, -1, 4)
    return DecoderOutput(
        logits=logits.repeat(layers, 1, 1, 1),
        boxes=boxes.repeat(layers, 1, 1, 1),
        hidden=torch.zeros(1, logits.shape[2], 4, dtype=torch.float64),
    )


def query_set(kinds, identities=None):
    n = len(kinds)
    identities = identities or [-1] * n
    return QuerySet(
        embeddings=torch.zeros(n, 4),
        ref_boxes=torch.full((n, 4), 0.5),
        kinds=np.asarray(kinds, dtype=np.int64),
        identities=np.asarray(identities, dtype=np.int64),
        scores=np.full(n, np.nan),
        miss_counts=np.zeros(n, dtype=np.int64),
    )


def logit(p):
    return math.log(p / (1 - p))


class TestFocalLoss:
    def test_half_probability_positive(self):
        val = focal_loss(torch.tensor([0.0], dtype=torch.float64), torch.tensor([1.0], dtype=torch.float64))
        expected = 0.25 * 0.25 * (-math.log(0.5))
        assert abs(float(val) - expected) < 1e-12
        assert abs(expected - 0.043321) < 1e-6

    def test_negative_branch(self):
        p = 0.3
        val = focal_loss(torch.tensor([logit(p)], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64))
        expected = (1 - FOCAL_ALPHA) * p**FOCAL_GAMMA * (-math.log(1 - p))
        assert abs(float(val) - expected) < 1e-12

    def test_sums_over_queries(self):
        logits = torch.tensor([0.0, 0.0], dtype=torch.float64)
        targets = torch.tensor([1.0, 1.0], dtype=torch.float64)
        assert abs(float(focal_loss(logits, targets)) - 2 * 0.25 * 0.25 * (-math.log(0.5))) < 1e-12


class TestDetectionCost:
    def test_perfect_prediction_hits_minima(self):
        gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
        pred_boxes = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
        logits = torch.tensor([8.0], dtype=torch.float64)  # confidence ~1
        w = LossWeights()
        cost = detection_cost(logits, pred_boxes, gt, w)
        p = 1.0 / (1.0 + math.exp(-8.0))
        cls = (FOCAL_ALPHA * (1 - p) ** 2 * -math.log(p + 1e-8)
               - (1 - FOCAL_ALPHA) * p**2 * -math.log(1 - p + 1e-8))
        assert abs(cost[0, 0] - w.cls * cls) < 1e-9  # l1 and giou terms exactly zero

    def test_dominant_prediction_matched(self):
        gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
        pred_boxes = torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.1, 0.1, 0.05, 0.05]], dtype=torch.float64)
        logits = torch.tensor([2.0, 2.0], dtype=torch.float64)
        cost = detection_cost(logits, pred_boxes, gt)
        assert cost[0, 0] < cost[1, 0]

    def test_matches_scalar_recomputation(self):
        rng = np.random.default_rng(4)
        logits = torch.tensor(rng.normal(size=3), dtype=torch.float64)
        pred = torch.tensor(rng.uniform(0.3, 0.6, size=(3, 4)), dtype=torch.float64)
        gt = torch.tensor(rng.uniform(0.3, 0.6, size=(3, 4)), dtype=torch.float64)
        w = LossWeights(cls=2.0, l1=5.0, giou=2.0)
        cost = detection_cost(logits, pred, gt, w)
        from querytrack.boxes import BoundingBox

        for i in range(3):
            p = 1 / (1 + math.exp(-float(logits[i])))
            cls = (FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * -math.log(p + 1e-8)
                   - (1 - FOCAL_ALPHA) * p**FOCAL_GAMMA * -math.log(1 - p + 1e-8))
            for j in range(3):
                l1 = float(np.abs(pred[i].numpy() - gt[j].numpy()).sum())
                g = giou(BoundingBox(*pred[i].tolist()), BoundingBox(*gt[j].tolist()))
                expected = w.cls * cls + w.l1 * l1 + w.giou * (1 - g)
                assert abs(cost[i, j] - expected) < 1e-9


class TestTalaAssign:
    def test_all_tracked_detects_unmatched(self):
        qs = query_set([KIND_TRACK, KIND_TRACK, KIND_DETECT], identities=[1, 2, -1])
        out = output_from([2.0, 2.0, 2.0], [[0.5, 0.5, 0.2, 0.2]] * 3)
        gt = torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.3, 0.3, 0.1, 0.1]], dtype=torch.float64)
        match = tala_assign(qs, out, gt, [7, 9], {1: 7, 2: 9})
        assert set(match.pairs) == {(0, 0), (1, 1)}
        assert match.unmatched_pred == [2]

    def test_absent_gt_leaves_track_unmatched(self):
        qs = query_set([KIND_TRACK, KIND_DETECT], identities=[1, -1])
        out = output_from([2.0, 2.0], [[0.5, 0.5, 0.2, 0.2]] * 2)
        gt = torch.zeros(0, 4, dtype=torch.float64)
        match = tala_assign(qs, out, gt, [], {1: 7})
        assert match.pairs == []
        assert match.unmatched_pred == [0, 1]

    def test_newborn_matched_by_cost(self):
        qs = query_set(
            [KIND_TRACK, KIND_TRACK, KIND_DETECT, KIND_DETECT, KIND_DETECT],
            identities=[1, 2, -1, -1, -1],
        )
        boxes = [
            [0.2, 0.2, 0.1, 0.1],  # track 1
            [0.8, 0.8, 0.1, 0.1],  # track 2
            [0.51, 0.52, 0.2, 0.2],  # detect, closest to newborn
            [0.1, 0.9, 0.05, 0.05],
            [0.9, 0.1, 0.05, 0.05],
        ]
        out = output_from([2.0, 2.0, 2.0, 2.0, 2.0], boxes)
        gt = torch.tensor(
            [[0.2, 0.2, 0.1, 0.1], [0.8, 0.8, 0.1, 0.1], [0.5, 0.5, 0.2, 0.2]], dtype=torch.float64
        )
        match = tala_assign(qs, out, gt, [7, 9, 11], {1: 7, 2: 9})
        assert (0, 0) in match.pairs and (1, 1) in match.pairs
        assert (2, 2) in match.pairs  # newborn gt 11 -> nearest detect query
        assert len(match.pairs) == 3

    def test_two_claims_on_one_identity_abort(self):
        qs = query_set([KIND_TRACK, KIND_TRACK], identities=[1, 2])
        out = output_from([0.0, 0.0], [[0.5, 0.5, 0.2, 0.2]] * 2)
        gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
        with pytest.raises(RuntimeError, match="claim"):
            tala_assign(qs, out, gt, [7], {1: 7, 2: 7})


class TestFrameLoss:
    def test_perfect_prediction_minimum(self):
        out = output_from([50.0], [[0.5, 0.5, 0.2, 0.2]])
        gt = torch.tensor([[0.5, 0.5, 0.2, 0.2]], dtype=torch.float64)
        match = MatchResult(pairs=[(0, 0)])
        bd = frame_loss(out, match, gt)
        assert float(bd.l1) == 0.0
        assert float(bd.giou) == 0.0
        assert float(bd.cls) < 1e-8

    def test_lambda_linearity(self):
        out = output_from([1.0, -1.0], [[0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.3, 0.3]])
        gt = torch.tensor([[0.5, 0.5, 0.25, 0.25]], dtype=torch.float64)
        match = MatchResult(pairs=[(0, 0)], unmatched_pred=[1])
        a = frame_loss(out, match, gt, LossWeights(cls=2, l1=5, giou=2))
        b = frame_loss(out, match, gt, LossWeights(cls=2, l1=10, giou=2))
        assert abs(float(b.total) - float(a.total) - 5 * float(a.l1)) < 1e-12

    def test_layers_sum(self):
        gt = torch.tensor([[0.5, 0.5, 0.25, 0.25]], dtype=torch.float64)
        match = MatchResult(pairs=[(0, 0)])
        one = frame_loss(output_from([0.3], [[0.4, 0.4, 0.2, 0.2]], layers=1), match, gt)
        three = frame_loss(output_from([0.3], [[0.4, 0.4, 0.2, 0.2]], layers=3), match, gt)
        assert abs(float(three.total) - 3 * float(one.total)) < 1e-10

    def test_box_gradients_match_finite_differences(self):
        rng = np.random.default_rng(8)
        boxes = torch.tensor(rng.uniform(0.35, 0.65, size=(2, 4)), dtype=torch.float64, requires_grad=True)
        gt = torch.tensor([[0.5, 0.5, 0.2, 0.2], [0.3, 0.6, 0.15, 0.2]], dtype=torch.float64)
        match = MatchResult(pairs=[(0, 0), (1, 1)])

        def loss_of(b):
            out = DecoderOutput(
                logits=torch.zeros(1, 1, 2, 1, dtype=torch.float64),
                boxes=b.reshape(1, 1, 2, 4),
                hidden=torch.zeros(1, 2, 4, dtype=torch.float64),
            )
            return frame_loss(out, match, gt).total

        total = loss_of(boxes)
        (grad,) = torch.autograd.grad(total, boxes)
        eps = 1e-5
        with torch.no_grad():
            for i in range(2):
                for j in range(4):
                    orig = boxes[i, j].item()
                    boxes[i, j] = orig + eps
                    hi = loss_of(boxes).item()
                    boxes[i, j] = orig - eps
                    lo = loss_of(boxes).item()
                    boxes[i, j] = orig
                    fd = (hi - lo) / (2 * eps)
                    denom = max(abs(fd), abs(grad[i, j].item()), 1e-10)
                    assert abs(fd - grad[i, j].item()) / denom < 1e-4

    def test_components_non_negative(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            n, g = int(rng.integers(1, 5)), int(rng.integers(0, 3))
            out = output_from(rng.normal(size=n), rng.uniform(0.3, 0.7, size=(n, 4)))
            gt = torch.tensor(rng.uniform(0.3, 0.7, size=(g, 4)), dtype=torch.float64)
            pairs = [(i, i) for i in range(min(n, g))]
            bd = frame_loss(out, MatchResult(pairs=pairs), gt)
            assert float(bd.cls) >= 0 and float(bd.l1) >= 0 and float(bd.giou) >= 0


class TestStageLosses:
    def test_empty_frame_clamps_denominator(self):
        out = output_from([0.5, -0.5], [[0.4, 0.4, 0.2, 0.2]] * 2)
        gt = torch.zeros(0, 4, dtype=torch.float64)
        loss, bd = stage1_loss(out, gt)
        assert bd.v == 0
        assert abs(float(loss) - float(bd.total)) < 1e-12  # divided by max(0, 1) = 1
        assert abs(float(bd.total) - LossWeights().cls * float(bd.cls)) < 1e-12

    def test_divides_by_v(self):
        out = output_from([3.0, 3.0], [[0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2]])
        gt = torch.tensor([[0.4, 0.4, 0.2, 0.2], [0.6, 0.6, 0.2, 0.2]], dtype=torch.float64)
        loss, bd = stage1_loss(out, gt)
        assert bd.v == 2
        assert abs(float(loss) - float(bd.total) / 2) < 1e-12

    def test_cal_loss_uniform_frames(self):
        from querytrack.losses import LossBreakdown

        one = torch.tensor(1.0, dtype=torch.float64)
        bds = [LossBreakdown(cls=one, l1=one, giou=one, total=one, v=1) for _ in range(5)]
        assert abs(float(cal_loss(bds, 5)) - 1.0) < 1e-12

    def test_cal_loss_hand_sum(self):
        from querytrack.losses import LossBreakdown

        bds = []
        for total in (1.0, 2.0, 3.0, 4.0, 5.0):
            t = torch.tensor(total, dtype=torch.float64)
            bds.append(LossBreakdown(cls=t, l1=t, giou=t, total=t, v=1))
        assert abs(float(cal_loss(bds, 5)) - 3.0) < 1e-12  # 15 / 5

    def test_cal_loss_rejects_wrong_length(self):
        from querytrack.losses import LossBreakdown

        t = torch.tensor(1.0)
        bds = [LossBreakdown(cls=t, l1=t, giou=t, total=t, v=1)] * 4
        with pytest.raises(ValueError, match="expected 5"):
            cal_loss(bds, 5)

    def test_cal_equals_stage1_on_single_frame_no_tracks(self):
        rng = np.random.default_rng(12)
        out = output_from(rng.normal(size=3), rng.uniform(0.3, 0.7, size=(3, 4)))
        gt = torch.tensor(rng.uniform(0.3, 0.7, size=(2, 4)), dtype=torch.float64)
        s1, bd = stage1_loss(out, gt)
        assert abs(float(cal_loss([bd], 1)) - float(s1)) < 1e-12

    def test_cal_loss_bookkeeping_oracle(self):
        from querytrack.losses import LossBreakdown

        rng = np.random.default_rng(100)
        for _ in range(100):
            n = int(rng.integers(1, 8))
            bds = []
            for _ in range(n):
                comps = rng.uniform(0, 3, size=3)
                w = LossWeights()
                total = w.cls * comps[0] + w.l1 * comps[1] + w.giou * comps[2]
                bds.append(LossBreakdown(
                    cls=torch.tensor(comps[0]), l1=torch.tensor(comps[1]),
                    giou=torch.tensor(comps[2]), total=torch.tensor(total),
                    v=int(rng.integers(0, 5)),
                ))
            expected = sum(float(b.total) for b in bds) / max(sum(b.v for b in bds), 1)
            assert abs(float(cal_loss(bds, n)) - expected) < 1e-6
