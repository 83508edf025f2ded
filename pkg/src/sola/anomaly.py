"""First and second order local anomaly prediction.

Each grid position is compared against one designated neighbor per group:
left at distance 1 or 2 ("v1"/"v2") and upper at distance 1 or 2
("h1"/"h2"). First order predictors map the feature grid to 64 sigmoid
anomaly maps per group; second order predictors apply the same two-tap
comparison to their own group's first order stack, producing one map
each. The four second order maps stacked in fixed group order feed a
small convolutional classifier that outputs a single forgery logit.
"""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .supervision import GROUPS, GROUP_OFFSETS

FIRST_ORDER_MAPS = 64


class AnomalyMaps(NamedTuple):
    first_order: dict[str, torch.Tensor]
    second_order: dict[str, torch.Tensor]

    def stacked_second_order(self) -> torch.Tensor:
        """(B, 4, h, w) in the documented group order v1, v2, h1, h2."""
        return torch.cat([self.second_order[g] for g in GROUPS], dim=1)


def export_map_images(maps: "AnomalyMaps", out_dir, prefix: str = "image", index: int = 0) -> list:
    """Write one 8-bit grayscale PNG per group and order (values x 255).

    First order stacks are collapsed to their channel mean before export.
    Returns the written paths.
    """
    from pathlib import Path

    import numpy as np
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for g in GROUPS:
        pairs = (
            (f"{prefix}_first_{g}.png", maps.first_order[g][index].mean(dim=0)),
            (f"{prefix}_second_{g}.png", maps.second_order[g][index, 0]),
        )
        for name, grid in pairs:
            img = (grid.detach().clamp(0, 1).numpy() * 255).round().astype(np.uint8)
            path = out_dir / name
            Image.fromarray(img, mode="L").save(path)
            written.append(path)
    return written


class PairPredictor(nn.Module):
    """Two-tap convolution comparing each position with its group neighbor.

    The input is zero-padded on the left/top by the group distance so the
    output keeps the input's spatial size; positions without a real
    neighbor are border artifacts and get masked out of the losses.
    """

    def __init__(self, in_channels: int, out_channels: int, group: str):
        super().__init__()
        if group not in GROUP_OFFSETS:
            raise ValueError(f"unknown group {group!r}")
        dr, dc = GROUP_OFFSETS[group]
        self.pad = (dc, 0, dr, 0)  # (left, right, top, bottom)
        kernel = (1, 2) if dc else (2, 1)
        dilation = (1, max(dc, 1)) if dc else (max(dr, 1), 1)
        self.conv = nn.Conv2d(in_channels, out_channels, kernel, dilation=dilation)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.conv(F.pad(x, self.pad)))


class AnomalyPredictorBank(nn.Module):
    """Per-group first order (C -> 64 maps) and second order (64 -> 1) predictors."""

    def __init__(self, in_channels: int, maps_per_group: int = FIRST_ORDER_MAPS):
        super().__init__()
        self.maps_per_group = maps_per_group
        self.first = nn.ModuleDict(
            {g: PairPredictor(in_channels, maps_per_group, g) for g in GROUPS}
        )
        self.second = nn.ModuleDict({g: PairPredictor(maps_per_group, 1, g) for g in GROUPS})

    def predict_first_order(self, feature: torch.Tensor) -> dict[str, torch.Tensor]:
        if feature.dim() != 4:
            raise ValueError(f"expected (B, C, h, w) feature, got {tuple(feature.shape)}")
        if feature.shape[-2] < 3 or feature.shape[-1] < 3:
            raise ValueError(f"feature grid {tuple(feature.shape[-2:])} too small; need at least 3x3")
        return {g: self.first[g](feature) for g in GROUPS}

    def predict_second_order(self, first_order: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        out = {}
        for g in GROUPS:
            stack = first_order[g]
            if stack.shape[1] != self.maps_per_group:
                raise ValueError(
                    f"group {g}: expected {self.maps_per_group} channels, got {stack.shape[1]}"
                )
            out[g] = self.second[g](stack)
        return out

    def forward(self, feature: torch.Tensor) -> AnomalyMaps:
        first = self.predict_first_order(feature)
        return AnomalyMaps(first_order=first, second_order=self.predict_second_order(first))


class ClassifierHead(nn.Module):
    """Fusion conv over the stacked second order maps, GAP, one logit."""

    def __init__(self, in_channels: int = len(GROUPS), width: int = 64):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, width, 3, padding=1)
        self.fc = nn.Linear(width, 1)

    def forward(self, stacked: torch.Tensor) -> torch.Tensor:
        if stacked.dim() != 4 or stacked.shape[1] != self.conv.in_channels:
            raise ValueError(
                f"expected (B, {self.conv.in_channels}, h, w) input, got {tuple(stacked.shape)}"
            )
        x = F.relu(self.conv(stacked))
        x = x.mean(dim=(2, 3))
        return self.fc(x).squeeze(-1)
