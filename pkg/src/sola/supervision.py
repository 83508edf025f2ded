"""Ground-truth anomaly grids from forgery masks, and the training losses.

A binary forgery mask is reduced to a patch-score grid (mean forged
fraction per patch). First order ground truth marks grid positions whose
score differs from a designated neighbor (left or upper, at distance 1 or
2); second order applies the same neighbor comparison to the first order
grids. Border positions whose neighbor falls off the grid carry a zero
entry and are excluded from all losses via validity masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

# Group -> (row offset, col offset) of the compared neighbor. "v" groups
# look left along the width axis, "h" groups look up along the height
# axis; the trailing digit is the distance.
GROUPS = ("v1", "v2", "h1", "h2")
GROUP_OFFSETS = {"v1": (0, 1), "v2": (0, 2), "h1": (1, 0), "h2": (2, 0)}

DEFAULT_PATCH_PIXELS = 16
# Patch scores are multiples of 1/patch_pixels^2, so any true difference
# clears this tolerance; it only filters float noise.
GT_EPS = 1e-6

PRED_CLAMP_EPS = 1e-7


@dataclass(frozen=True)
class PatchScoreGrid:
    scores: np.ndarray
    patch_pixels: int


@dataclass(frozen=True)
class AnomalyGroundTruth:
    """Binary first/second order grids plus validity masks, keyed by group."""

    first_order: dict[str, np.ndarray]
    second_order: dict[str, np.ndarray]
    valid_first: dict[str, np.ndarray]
    valid_second: dict[str, np.ndarray]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")


def patch_scores(mask: np.ndarray, patch_pixels: int = DEFAULT_PATCH_PIXELS) -> PatchScoreGrid:
    """Mean forged fraction of each patch_pixels x patch_pixels patch."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    if h % patch_pixels or w % patch_pixels:
        raise ValueError(f"mask {mask.shape} not divisible into {patch_pixels}px patches")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary (0/1)")
    grid = mask.astype(np.float64).reshape(
        h // patch_pixels, patch_pixels, w // patch_pixels, patch_pixels
    ).mean(axis=(1, 3))
    return PatchScoreGrid(scores=grid, patch_pixels=patch_pixels)


def _neighbor_diff(values: np.ndarray, dr: int, dc: int, eps: float):
    """Binary grid marking positions whose (i-dr, j-dc) neighbor differs."""
    h, w = values.shape
    gt = np.zeros((h, w), dtype=np.uint8)
    valid = np.zeros((h, w), dtype=np.uint8)
    diff = np.abs(values[dr:, dc:] - values[: h - dr, : w - dc])
    gt[dr:, dc:] = (diff > eps).astype(np.uint8)
    valid[dr:, dc:] = 1
    return gt, valid


def first_order_gt(grid: PatchScoreGrid, eps: float = GT_EPS):
    """Per group: 1 where the patch score differs from the group's neighbor."""
    gts, valids = {}, {}
    for g in GROUPS:
        dr, dc = GROUP_OFFSETS[g]
        gts[g], valids[g] = _neighbor_diff(grid.scores, dr, dc, eps)
    return gts, valids


def second_order_gt(first_order: dict[str, np.ndarray]):
    """Neighbor comparison applied again, per group, on that group's grid.

    Operates on the stored first order grids (masked border positions hold
    zero); validity only requires the neighbor position to be on-grid.
    """
    gts, valids = {}, {}
    for g in GROUPS:
        values = np.asarray(first_order[g])
        if not np.isin(values, (0, 1)).all():
            raise ValueError(f"first order grid {g} must be binary")
        dr, dc = GROUP_OFFSETS[g]
        gts[g], valids[g] = _neighbor_diff(values.astype(np.float64), dr, dc, 0.0)
    return gts, valids


def anomaly_ground_truth(
    mask: np.ndarray, patch_pixels: int = DEFAULT_PATCH_PIXELS
) -> AnomalyGroundTruth:
    """Full mask -> first/second order GT pipeline."""
    grid = patch_scores(mask, patch_pixels)
    first, valid_first = first_order_gt(grid)
    second, valid_second = second_order_gt(first)
    return AnomalyGroundTruth(first, second, valid_first, valid_second)


def _masked_bce(pred: torch.Tensor, target: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """BCE averaged over valid positions (broadcast across batch/channels)."""
    pred = pred.clamp(PRED_CLAMP_EPS, 1.0 - PRED_CLAMP_EPS)
    bce = -(target * pred.log() + (1.0 - target) * (1.0 - pred).log())
    m = valid.to(bce.dtype).expand_as(bce)
    return (bce * m).sum() / m.sum()


def _masked_l1(pred: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Per-sample mean |pred| over valid positions; returns shape (B,)."""
    m = valid.to(pred.dtype).expand_as(pred)
    dims = tuple(range(1, pred.dim()))
    return (pred.abs() * m).sum(dim=dims) / m.sum(dim=dims)


def _as_map_tensor(x, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x), dtype=like.dtype, device=like.device)
    while t.dim() < like.dim():
        t = t.unsqueeze(0)
    return t


def supervised_loss(
    first_order: dict[str, torch.Tensor],
    second_order: dict[str, torch.Tensor],
    gt: AnomalyGroundTruth | list[AnomalyGroundTruth],
    logit: torch.Tensor,
    label: torch.Tensor,
    w: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Classification BCE plus pixel-wise BCE on both anomaly orders.

    First order GT grids broadcast across the 64 prediction channels. Each
    group's BCE is the mean over its valid positions; groups are summed.
    Accepts a single ground truth or one per batch element.
    """
    any_map = next(iter(first_order.values()))
    gt_list = gt if isinstance(gt, (list, tuple)) else [gt]
    if len(gt_list) not in (1, any_map.shape[0]):
        raise ValueError(f"got {len(gt_list)} ground truths for batch of {any_map.shape[0]}")

    def stack(key, order):
        grids = [getattr(g, order)[key] for g in gt_list]
        return _as_map_tensor(np.stack(grids)[:, None], any_map)

    logit = logit.reshape(-1)
    label = torch.as_tensor(label, dtype=logit.dtype, device=logit.device).reshape(-1)
    loss = w.alpha * F.binary_cross_entropy_with_logits(logit, label)
    for g in GROUPS:
        valid1 = _as_map_tensor(gt_list[0].valid_first[g], any_map)
        loss = loss + w.beta * _masked_bce(first_order[g], stack(g, "first_order"), valid1)
        valid2 = _as_map_tensor(gt_list[0].valid_second[g], any_map)
        loss = loss + w.gamma * _masked_bce(second_order[g], stack(g, "second_order"), valid2)
    return loss


def grid_valid_masks(grid_hw: tuple[int, int]):
    """Validity masks for every group and both orders, from geometry alone."""
    dummy = PatchScoreGrid(np.zeros(grid_hw), patch_pixels=1)
    first, valid_first = first_order_gt(dummy)
    _, valid_second = second_order_gt(first)
    return valid_first, valid_second


def single_side_loss(
    first_order: dict[str, torch.Tensor],
    second_order: dict[str, torch.Tensor],
    label: torch.Tensor,
    w: LossWeights = LossWeights(),
) -> torch.Tensor:
    """Weakly supervised loss: pull anomaly maps of real images to zero.

    Fake images (label 1) contribute nothing; for real images the mean
    absolute map value over valid positions is accumulated per group,
    weighted beta for first order and gamma for second. Returns the batch
    mean.
    """
    any_map = next(iter(first_order.values()))
    label = torch.as_tensor(label, dtype=any_map.dtype, device=any_map.device).reshape(-1)
    real = 1.0 - label
    valid_first, valid_second = grid_valid_masks(any_map.shape[-2:])
    per_sample = torch.zeros_like(label)
    for g in GROUPS:
        v1 = _as_map_tensor(valid_first[g], any_map)
        per_sample = per_sample + w.beta * _masked_l1(first_order[g], v1)
        v2 = _as_map_tensor(valid_second[g], any_map)
        per_sample = per_sample + w.gamma * _masked_l1(second_order[g], v2)
    return (per_sample * real).mean()


def mean_anomaly_l1(
    first_order: dict[str, torch.Tensor], second_order: dict[str, torch.Tensor]
) -> torch.Tensor:
    """Per-image mean |value| across all eight map groups, valid positions only."""
    any_map = next(iter(first_order.values()))
    valid_first, valid_second = grid_valid_masks(any_map.shape[-2:])
    total = torch.zeros(any_map.shape[0], dtype=any_map.dtype, device=any_map.device)
    for g in GROUPS:
        total = total + _masked_l1(first_order[g], _as_map_tensor(valid_first[g], any_map))
        total = total + _masked_l1(second_order[g], _as_map_tensor(valid_second[g], any_map))
    return total / (2 * len(GROUPS))
