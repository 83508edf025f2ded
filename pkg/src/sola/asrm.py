"""Adaptive SRM: a trainable 5x5 noise-extraction convolution.

The layer starts from the fixed SRM bank and, when the constraint is
enabled, is re-projected after every optimizer step so each kernel slice
keeps its high-pass form: center tap -1, remaining taps summing to 1.
No bias and no nonlinearity, so constant inputs always map to zero.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn

from .srm import CENTER, KERNEL_SIZE, FilterBank, builtin_srm_bank

logger = logging.getLogger(__name__)

# Below this magnitude the off-center sum gives no usable rescaling
# direction; projection is skipped for that kernel rather than dividing
# by a vanishing value.
DEGENERATE_SUM_EPS = 1e-6


class AsrmConv(nn.Module):
    """Constrained noise-residual convolution (3 in, one output per kernel).

    ``constraint_enabled`` controls whether :meth:`project` rewrites the
    weights; a frozen layer (``trainable=False``) reproduces plain SRM
    preprocessing, and an unconstrained trainable one the "lsrm" variant.
    """

    def __init__(self, in_channels: int = 3, out_channels: int = 3,
                 constraint_enabled: bool = True, trainable: bool = True):
        super().__init__()
        self.constraint_enabled = constraint_enabled
        self.conv = nn.Conv2d(
            in_channels,
            out_channels,
            KERNEL_SIZE,
            padding=KERNEL_SIZE // 2,
            padding_mode="reflect",
            bias=False,
        )
        self.conv.weight.requires_grad_(trainable)

    @classmethod
    def init_from_srm(cls, bank: FilterBank | None = None, in_channels: int = 3,
                      constraint_enabled: bool = True, trainable: bool = True) -> "AsrmConv":
        """Layer with each quantized SRM kernel replicated across input channels."""
        bank = bank if bank is not None else builtin_srm_bank()
        if len(bank) == 0:
            raise ValueError("filter bank is empty")
        layer = cls(in_channels, len(bank), constraint_enabled, trainable)
        stack = bank.quantized_stack()  # (out, 5, 5)
        weights = np.repeat(stack[:, None], in_channels, axis=1)
        with torch.no_grad():
            layer.conv.weight.copy_(torch.from_numpy(weights))
        return layer

    @classmethod
    def random_init(cls, in_channels: int = 3, out_channels: int = 3, seed: int | None = None) -> "AsrmConv":
        """Unconstrained randomly initialized variant (no SRM structure)."""
        if seed is not None:
            torch.manual_seed(seed)
        return cls(in_channels, out_channels, constraint_enabled=False, trainable=True)

    @property
    def weight(self) -> torch.Tensor:
        return self.conv.weight

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != self.conv.in_channels:
            raise ValueError(
                f"expected (B, {self.conv.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        return self.conv(x)

    @torch.no_grad()
    def project(self) -> torch.Tensor:
        """Re-impose center=-1 / off-center-sum=1 on every 2-D kernel slice.

        Kernels whose off-center sum is degenerate (near zero) are left
        untouched for this step and the event is logged. Returns the
        weights after projection.
        """
        if self.constraint_enabled:
            w = self.conv.weight
            flat = w.view(w.shape[0] * w.shape[1], KERNEL_SIZE, KERNEL_SIZE)
            for idx, slice_ in enumerate(flat):
                off_sum = slice_.sum() - slice_[CENTER, CENTER]
                if off_sum.abs() < DEGENERATE_SUM_EPS:
                    logger.warning(
                        "projection skipped for kernel slice %d: off-center sum %.3g is degenerate",
                        idx,
                        off_sum.item(),
                    )
                    continue
                slice_ /= off_sum
                slice_[CENTER, CENTER] = -1.0
        return self.conv.weight.detach().clone()

    def constraint_report(self) -> list[dict]:
        """Per-slice center and off-center sum, with a pass flag at 1e-6."""
        w = self.conv.weight.detach()
        report = []
        for o in range(w.shape[0]):
            for i in range(w.shape[1]):
                slice_ = w[o, i]
                center = slice_[CENTER, CENTER].item()
                off_sum = (slice_.sum() - slice_[CENTER, CENTER]).item()
                report.append(
                    {
                        "out_channel": o,
                        "in_channel": i,
                        "center": center,
                        "off_center_sum": off_sum,
                        "satisfied": abs(center + 1.0) < 1e-6 and abs(off_sum - 1.0) < 1e-6,
                    }
                )
        return report

    def constraint_satisfied(self, tol: float = 1e-6) -> bool:
        return all(
            abs(r["center"] + 1.0) < tol and abs(r["off_center_sum"] - 1.0) < tol
            for r in self.constraint_report()
        )
