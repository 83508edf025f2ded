"""Reference SRM (Spatial Rich Model) residual pipeline.

Fixed steganalysis high-pass filters that predict a pixel from its
neighborhood and subtract; the quantized kernels have a -1 center tap and
off-center taps summing to 1, so constant regions map to zero residual.
This module is the non-learnable reference that the trainable noise layer
is initialized from and tested against.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

KERNEL_SIZE = 5
CENTER = KERNEL_SIZE // 2

DEFAULT_TRUNCATION = 2


@dataclass(frozen=True)
class SrmKernel:
    """One 5x5 high-pass kernel plus its quantizer.

    ``weights`` holds the raw integer-valued taps (smaller kernels are
    zero-padded to 5x5, center aligned). Dividing by ``q`` yields the
    quantized kernel whose center is exactly -1 and whose remaining taps
    sum to exactly 1.
    """

    name: str
    weights: np.ndarray
    q: float

    def quantized(self) -> np.ndarray:
        return self.weights / self.q

    def validate(self) -> None:
        """Check the high-pass constraint exactly, on the raw integer taps.

        Center must equal -q and the remaining taps must sum to q, so the
        quantized kernel has center -1 and off-center sum 1 in exact
        (rational) arithmetic.
        """
        if self.weights.shape != (KERNEL_SIZE, KERNEL_SIZE):
            raise ValueError(f"kernel {self.name}: expected 5x5, got {self.weights.shape}")
        if self.q <= 0:
            raise ValueError(f"kernel {self.name}: quantizer must be positive, got {self.q}")
        center = self.weights[CENTER, CENTER]
        off_sum = self.weights.sum() - center
        if center != -self.q:
            raise ValueError(f"kernel {self.name}: center tap is {center}, expected {-self.q}")
        if off_sum != self.q:
            raise ValueError(f"kernel {self.name}: off-center tap sum is {off_sum}, expected {self.q}")


@dataclass(frozen=True)
class FilterBank:
    kernels: tuple[SrmKernel, ...]

    def __len__(self) -> int:
        return len(self.kernels)

    def __iter__(self):
        return iter(self.kernels)

    def quantized_stack(self) -> np.ndarray:
        """All quantized kernels as one (n, 5, 5) array."""
        return np.stack([k.quantized() for k in self.kernels])


@dataclass(frozen=True)
class ResidualImage:
    """Integer residual after quantize/round/truncate; values in [-T, T]."""

    values: np.ndarray
    truncation: int


def builtin_srm_bank() -> FilterBank:
    """The three standard SRM kernels with quantizers 2, 4 and 12.

    Second-order 1-D, 3x3 square and 5x5 "KV" predictors, as used for
    noise-residual extraction throughout the image forensics literature.
    """
    second_order_1d = np.array(
        [
            [0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0],
            [0, 1, -2, 1, 0],
            [0, 0, 0, 0, 0],
            [0, 0, 0, 0, 0],
        ],
        dtype=np.float64,
    )
    square_3x3 = np.array(
        [
            [0, 0, 0, 0, 0],
            [0, -1, 2, -1, 0],
            [0, 2, -4, 2, 0],
            [0, -1, 2, -1, 0],
            [0, 0, 0, 0, 0],
        ],
        dtype=np.float64,
    )
    kv_5x5 = np.array(
        [
            [-1, 2, -2, 2, -1],
            [2, -6, 8, -6, 2],
            [-2, 8, -12, 8, -2],
            [2, -6, 8, -6, 2],
            [-1, 2, -2, 2, -1],
        ],
        dtype=np.float64,
    )
    kernels = (
        SrmKernel("second_order_1d", second_order_1d, 2.0),
        SrmKernel("square_3x3", square_3x3, 4.0),
        SrmKernel("kv_5x5", kv_5x5, 12.0),
    )
    for k in kernels:
        k.validate()
    return FilterBank(kernels)


def residual(image: np.ndarray, kernel: SrmKernel) -> np.ndarray:
    """Noise residual of a 2-D image: correlation with the quantized kernel.

    Borders use reflection padding (edge pixel not repeated) so the output
    has the same shape as the input.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {image.shape}")
    if image.shape[0] < KERNEL_SIZE or image.shape[1] < KERNEL_SIZE:
        raise ValueError(f"image {image.shape} is smaller than the {KERNEL_SIZE}x{KERNEL_SIZE} kernel")
    # scipy's 'mirror' mode reflects without repeating the edge pixel,
    # matching torch's 'reflect' padding in the trainable layer.
    return ndimage.correlate(image, kernel.quantized(), mode="mirror")


def quantize_round_truncate(
    res: np.ndarray, q: float, truncation: int = DEFAULT_TRUNCATION
) -> ResidualImage:
    """Map each residual r to clamp(round(r / q), -T, T).

    Rounding is half-away-from-zero to keep positive and negative residuals
    symmetric.
    """
    if q <= 0:
        raise ValueError(f"quantizer must be positive, got {q}")
    if truncation < 1:
        raise ValueError(f"truncation threshold must be >= 1, got {truncation}")
    scaled = np.asarray(res, dtype=np.float64) / q
    rounded = np.trunc(scaled + np.copysign(0.5, scaled))
    clipped = np.clip(rounded, -truncation, truncation).astype(np.int64)
    return ResidualImage(values=clipped, truncation=truncation)


def export_text(bank: FilterBank) -> str:
    """Plain-text dump of the quantized bank, one kernel per block."""
    blocks = []
    for k in bank:
        rows = "\n".join(" ".join(f"{v:.10g}" for v in row) for row in k.quantized())
        blocks.append(f"# {k.name} q={k.q:g}\n{rows}")
    return "\n\n".join(blocks) + "\n"
