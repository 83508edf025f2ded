import math

import numpy as np
import pytest
import torch

from sola import supervision as sup
from sola.supervision import GROUPS, GROUP_OFFSETS, LossWeights


def enumerate_first_order(scores, eps=sup.GT_EPS):
    """Independent brute-force enumeration of the first order rule."""
    h, w = scores.shape
    out = {}
    for g in GROUPS:
        dr, dc = GROUP_OFFSETS[g]
        gt = np.zeros((h, w), dtype=np.uint8)
        valid = np.zeros((h, w), dtype=np.uint8)
        for i in range(h):
            for j in range(w):
                ni, nj = i - dr, j - dc
                if ni < 0 or nj < 0:
                    continue
                valid[i, j] = 1
                if abs(scores[i, j] - scores[ni, nj]) > eps:
                    gt[i, j] = 1
        out[g] = (gt, valid)
    return out


def enumerate_second_order(first):
    h, w = first[GROUPS[0]].shape
    out = {}
    for g in GROUPS:
        dr, dc = GROUP_OFFSETS[g]
        gt = np.zeros((h, w), dtype=np.uint8)
        valid = np.zeros((h, w), dtype=np.uint8)
        a = first[g]
        for i in range(h):
            for j in range(w):
                ni, nj = i - dr, j - dc
                if ni < 0 or nj < 0:
                    continue
                valid[i, j] = 1
                if abs(int(a[i, j]) - int(a[ni, nj])) > 0:
                    gt[i, j] = 1
        out[g] = (gt, valid)
    return out


def naive_patch_scores(mask, p):
    gh, gw = mask.shape[0] // p, mask.shape[1] // p
    grid = np.zeros((gh, gw))
    for i in range(gh):
        for j in range(gw):
            grid[i, j] = mask[i * p : (i + 1) * p, j * p : (j + 1) * p].mean()
    return grid


class TestPatchScores:
    def test_all_zero_mask(self):
        grid = sup.patch_scores(np.zeros((64, 64), dtype=np.uint8), 16)
        assert grid.scores.shape == (4, 4)
        assert (grid.scores == 0).all()

    def test_quadrant_mask(self):
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[:16, :16] = 1
        grid = sup.patch_scores(mask, 16)
        assert grid.scores.tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            mask = (rng.random((256, 256)) < 0.3).astype(np.uint8)
            grid = sup.patch_scores(mask, 16)
            assert np.array_equal(grid.scores, naive_patch_scores(mask, 16))

    def test_indivisible_dims_raise(self):
        with pytest.raises(ValueError, match="divisible"):
            sup.patch_scores(np.zeros((30, 32), dtype=np.uint8), 16)

    def test_non_binary_mask_raises(self):
        with pytest.raises(ValueError, match="binary"):
            sup.patch_scores(np.full((32, 32), 0.5), 16)


class TestFirstOrderGt:
    def test_hand_case_2x2(self):
        grid = sup.PatchScoreGrid(np.array([[1.0, 0.0], [0.0, 0.0]]), 16)
        gts, valids = sup.first_order_gt(grid)
        assert gts["v1"][0, 1] == 1 and gts["v1"][1, 1] == 0
        assert gts["h1"][1, 0] == 1 and gts["h1"][1, 1] == 0
        # column/row 0 has no left/upper neighbor
        assert valids["v1"][:, 0].sum() == 0 and valids["h1"][0, :].sum() == 0
        # distance-2 groups have no valid position on a 2x2 grid
        assert valids["v2"].sum() == 0 and valids["h2"].sum() == 0
        assert gts["v2"].sum() == 0 and gts["h2"].sum() == 0

    def test_constant_grid_all_zero(self):
        grid = sup.PatchScoreGrid(np.full((6, 6), 0.375), 16)
        gts, _ = sup.first_order_gt(grid)
        assert all(g.sum() == 0 for g in gts.values())

    def test_matches_enumerator_on_random_grids(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            h, w = rng.integers(4, 17, size=2)
            scores = rng.integers(0, 5, size=(h, w)) / 4.0
            gts, valids = sup.first_order_gt(sup.PatchScoreGrid(scores, 16))
            ref = enumerate_first_order(scores)
            for g in GROUPS:
                assert np.array_equal(gts[g], ref[g][0])
                assert np.array_equal(valids[g], ref[g][1])


class TestSecondOrderGt:
    def test_all_zero_input(self):
        zeros = {g: np.zeros((5, 5), dtype=np.uint8) for g in GROUPS}
        gts, _ = sup.second_order_gt(zeros)
        assert all(g.sum() == 0 for g in gts.values())

    def test_hand_case_row(self):
        first = {g: np.zeros((1, 4), dtype=np.uint8) for g in GROUPS}
        first["v1"] = np.array([[0, 1, 0, 0]], dtype=np.uint8)
        gts, valids = sup.second_order_gt(first)
        assert gts["v1"][0].tolist() == [0, 1, 1, 0]
        assert valids["v1"][0].tolist() == [0, 1, 1, 1]

    def test_non_binary_raises(self):
        bad = {g: np.full((4, 4), 0.5) for g in GROUPS}
        with pytest.raises(ValueError, match="binary"):
            sup.second_order_gt(bad)

    def test_matches_enumerator_on_random_grids(self):
        rng = np.random.default_rng(13)
        for _ in range(1000):
            h, w = rng.integers(4, 17, size=2)
            first = {g: (rng.random((h, w)) < 0.4).astype(np.uint8) for g in GROUPS}
            gts, valids = sup.second_order_gt(first)
            ref = enumerate_second_order(first)
            for g in GROUPS:
                assert np.array_equal(gts[g], ref[g][0])
                assert np.array_equal(valids[g], ref[g][1])


class TestGroundTruthPipeline:
    def test_fully_real_and_fully_forged_masks_give_zero_gt(self):
        for fill in (0, 1):
            gt = sup.anomaly_ground_truth(np.full((64, 64), fill, dtype=np.uint8), 16)
            assert all(g.sum() == 0 for g in gt.first_order.values())
            assert all(g.sum() == 0 for g in gt.second_order.values())

    def test_halved_mask_marks_the_boundary_column(self):
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[:, 32:] = 1
        gt = sup.anomaly_ground_truth(mask, 16)
        # scores rows are [0, 0, 1, 1]; only the 0->1 transition differs
        assert gt.first_order["v1"][:, 2].tolist() == [1, 1, 1, 1]
        assert gt.first_order["v1"][:, 3].tolist() == [0, 0, 0, 0]
        assert gt.first_order["h1"].sum() == 0


def _dummy_maps(batch=1, h=4, w=4, channels=64, fill=0.5):
    first = {g: torch.full((batch, channels, h, w), fill, dtype=torch.float64) for g in GROUPS}
    second = {g: torch.full((batch, 1, h, w), fill, dtype=torch.float64) for g in GROUPS}
    return first, second


class TestSupervisedLoss:
    def test_perfect_predictions_near_zero(self):
        mask = np.zeros((64, 64), dtype=np.uint8)
        mask[:, 32:] = 1
        gt = sup.anomaly_ground_truth(mask, 16)
        first = {
            g: torch.tensor(gt.first_order[g], dtype=torch.float64)[None, None].expand(1, 64, 4, 4).clone()
            for g in GROUPS
        }
        second = {
            g: torch.tensor(gt.second_order[g], dtype=torch.float64)[None, None].clone() for g in GROUPS
        }
        loss = sup.supervised_loss(first, second, gt, torch.tensor([20.0]), torch.tensor([1.0]))
        assert loss.item() < 1e-5

    def test_uniform_half_prediction_closed_form(self):
        # p=0.5 against all-zero GT: mean BCE is ln 2 per group, four groups.
        gt = sup.anomaly_ground_truth(np.zeros((64, 64), dtype=np.uint8), 16)
        first, second = _dummy_maps(h=4, w=4)
        w = LossWeights(alpha=0.0, beta=1.0, gamma=0.0)
        loss = sup.supervised_loss(first, second, gt, torch.tensor([0.0]), torch.tensor([0.0]), w)
        assert abs(loss.item() - 4 * math.log(2)) < 1e-12

    def test_matches_scalar_loop_oracle(self):
        rng = np.random.default_rng(17)
        torch.manual_seed(17)
        mask = (rng.random((64, 64)) < 0.4).astype(np.uint8)
        gt = sup.anomaly_ground_truth(mask, 16)
        first = {g: torch.rand(1, 3, 4, 4, dtype=torch.float64) for g in GROUPS}
        second = {g: torch.rand(1, 1, 4, 4, dtype=torch.float64) for g in GROUPS}
        w = LossWeights(alpha=0.7, beta=1.3, gamma=0.9)
        logit, label = 0.4, 1.0

        expected = w.alpha * -math.log(1.0 / (1.0 + math.exp(-logit)))
        for g in GROUPS:
            for order, preds, weight in (
                ("first", first[g][0], w.beta),
                ("second", second[g][0], w.gamma),
            ):
                tgt = gt.first_order[g] if order == "first" else gt.second_order[g]
                valid = gt.valid_first[g] if order == "first" else gt.valid_second[g]
                total, count = 0.0, 0
                for c in range(preds.shape[0]):
                    for i in range(4):
                        for j in range(4):
                            if not valid[i, j]:
                                continue
                            p = min(max(preds[c, i, j].item(), 1e-7), 1 - 1e-7)
                            t = float(tgt[i, j])
                            total += -(t * math.log(p) + (1 - t) * math.log(1 - p))
                            count += 1
                expected += weight * total / count

        loss = sup.supervised_loss(first, second, gt, torch.tensor([logit]), torch.tensor([label]), w)
        assert abs(loss.item() - expected) < 1e-8

    def test_clamps_extreme_predictions(self):
        gt = sup.anomaly_ground_truth(np.zeros((64, 64), dtype=np.uint8), 16)
        first, second = _dummy_maps(fill=1.0)
        loss = sup.supervised_loss(first, second, gt, torch.tensor([0.0]), torch.tensor([0.0]))
        assert torch.isfinite(loss)


class TestSingleSideLoss:
    def test_fake_image_contributes_zero(self):
        first, second = _dummy_maps(fill=0.9)
        loss = sup.single_side_loss(first, second, torch.tensor([1.0]))
        assert loss.item() == 0.0

    def test_real_image_zero_maps(self):
        first, second = _dummy_maps(fill=0.0)
        loss = sup.single_side_loss(first, second, torch.tensor([0.0]))
        assert loss.item() == 0.0

    def test_real_image_quarter_map_hand_value(self):
        first, second = _dummy_maps(fill=0.0)
        first["v1"] = torch.full_like(first["v1"], 0.25)
        w = LossWeights(alpha=1.0, beta=1.0, gamma=0.0)
        loss = sup.single_side_loss(first, second, torch.tensor([0.0]), w)
        assert abs(loss.item() - 0.25) < 1e-12

    def test_batch_mixes_real_and_fake(self):
        first, second = _dummy_maps(batch=2, fill=0.5)
        w = LossWeights(beta=1.0, gamma=0.0)
        loss = sup.single_side_loss(first, second, torch.tensor([0.0, 1.0]), w)
        # one real image with 0.5 maps in 4 groups, averaged over batch of 2
        assert abs(loss.item() - (4 * 0.5) / 2) < 1e-12

    def test_non_negative(self):
        torch.manual_seed(5)
        for _ in range(10):
            first = {g: torch.rand(2, 8, 5, 5) for g in GROUPS}
            second = {g: torch.rand(2, 1, 5, 5) for g in GROUPS}
            loss = sup.single_side_loss(first, second, torch.tensor([0.0, 0.0]))
            assert loss.item() >= 0.0


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(alpha=-0.1)


def test_mean_anomaly_l1_uniform_maps():
    first, second = _dummy_maps(fill=0.2)
    out = sup.mean_anomaly_l1(first, second)
    assert out.shape == (1,)
    assert abs(out.item() - 0.2) < 1e-12
