"""Channel-attention fusion of the RGB and noise streams, and patch-wise
self-attention enhancement of local feature vectors."""

from __future__ import annotations

import torch
import torch.nn as nn


class ChannelGate(nn.Module):
    """Squeeze-excitation gate: global average pool, bottleneck MLP, sigmoid."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(x.mean(dim=(2, 3), keepdim=True))


class DcamBlock(nn.Module):
    """Dual channel attention fusion.

    The noise stream is channel-gated, concatenated with the RGB stream,
    projected back to the RGB channel count with a 1x1 convolution, and
    gated again.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.noise_gate = ChannelGate(channels, reduction)
        self.fuse = nn.Conv2d(2 * channels, channels, 1)
        self.out_gate = ChannelGate(channels, reduction)

    def forward(self, rgb: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
        if rgb.shape != noise.shape:
            raise ValueError(f"stream shapes differ: rgb {tuple(rgb.shape)} vs noise {tuple(noise.shape)}")
        gated = noise * self.noise_gate(noise)
        fused = self.fuse(torch.cat([rgb, gated], dim=1))
        return fused * self.out_gate(fused)


class LemBlock(nn.Module):
    """Local enhancement: per-patch softmax self-attention, added residually.

    The map is split into a grid x grid set of non-overlapping patches;
    inside each patch every feature vector is replaced by an attention-
    weighted mix of the others, scaled by a learnable factor initialized
    to zero so training starts from the identity.

    When each patch holds exactly one feature vector (map size equals the
    patch grid, as at the final backbone stage) the softmax weight is
    identically 1, so ``patch_positions=1`` drops the query/key
    projections and the block reduces to the value projection alone.
    """

    def __init__(self, channels: int, grid: int = 16, patch_positions: int | None = None):
        super().__init__()
        self.grid = grid
        inter = max(1, channels // 2)
        if patch_positions == 1:
            self.theta = self.f = None
        else:
            self.theta = nn.Conv2d(channels, inter, 1)
            self.f = nn.Conv2d(channels, inter, 1)
        self.g = nn.Conv2d(channels, channels, 1)
        self.scale = nn.Parameter(torch.zeros(1))

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (n x n) weights per patch; n = positions per patch."""
        if self.theta is None:
            b = x.shape[0]
            return torch.ones(b, self.grid * self.grid, 1, 1, dtype=x.dtype, device=x.device)
        th = self._to_patches(self.theta(x))
        fe = self._to_patches(self.f(x))
        return torch.softmax(th @ fe.transpose(-1, -2), dim=-1)

    def _to_patches(self, x: torch.Tensor) -> torch.Tensor:
        # (B, C, H, W) -> (B, patches, positions, C)
        b, c, h, w = x.shape
        ph, pw = h // self.grid, w // self.grid
        x = x.view(b, c, self.grid, ph, self.grid, pw)
        x = x.permute(0, 2, 4, 3, 5, 1).contiguous()
        return x.view(b, self.grid * self.grid, ph * pw, c)

    def _from_patches(self, x: torch.Tensor, h: int, w: int) -> torch.Tensor:
        b, _, _, c = x.shape
        ph, pw = h // self.grid, w // self.grid
        x = x.view(b, self.grid, self.grid, ph, pw, c)
        x = x.permute(0, 5, 1, 3, 2, 4).contiguous()
        return x.view(b, c, h, w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        if h % self.grid or w % self.grid:
            raise ValueError(f"spatial dims {(h, w)} not divisible into a {self.grid}x{self.grid} patch grid")
        if self.theta is None:
            return x + self.scale * self.g(x)
        weights = self.attention_weights(x)
        values = self._to_patches(self.g(x))
        enhanced = self._from_patches(weights @ values, h, w)
        return x + self.scale * enhanced
