"""Synthetic blended-forgery dataset with exact pixel masks.

Fakes are made the way face forgeries are assembled: a donor region is
alpha-blended into a base image along a Gaussian-feathered boundary. The
stored mask is the soft alpha thresholded at 0.5. Source imagery is
procedurally generated multi-octave texture, so the dataset is fully
deterministic from a seed and needs no external files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

FAMILIES = ("ellipse", "rectangle", "polygon")
DONOR_STRATEGIES = ("other-image", "color-jittered-self")

IMAGE_SIZE = 256
SOURCE_SIZE = 384  # sources are larger so random crops differ

MANIFEST_NAME = "manifest.jsonl"


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class BlendRecipe:
    family: str = "ellipse"
    donor: str = "color-jittered-self"
    blur_sigma: float = 2.0
    area_range: tuple[float, float] = (0.05, 0.35)
    jitter_strength: float = 0.25

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown mask family {self.family!r}; choose from {FAMILIES}")
        if self.donor not in DONOR_STRATEGIES:
            raise ValueError(f"unknown donor strategy {self.donor!r}; choose from {DONOR_STRATEGIES}")
        lo, hi = self.area_range
        if not 0 < lo < hi < 1:
            raise ValueError(f"area range must satisfy 0 < lo < hi < 1, got {self.area_range}")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int
    mask: np.ndarray | None  # (H, W) uint8 in {0, 1}
    family: str
    name: str


def make_source_images(n: int, seed: int, size: int = SOURCE_SIZE) -> list[np.ndarray]:
    """Procedural natural-texture sources (uint8 RGB) with sensor-like noise."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        img = np.zeros((size, size, 3))
        for octave, weight in ((2, 0.45), (6, 0.3), (16, 0.15), (48, 0.1)):
            grid = rng.random((octave, octave, 3))
            zoom = (size / octave, size / octave, 1)
            img += weight * ndimage.zoom(grid, zoom, order=1, mode="nearest")
        img -= img.min(axis=(0, 1))
        peak = img.max(axis=(0, 1))
        img /= np.where(peak > 0, peak, 1.0)
        # random tone curve per channel keeps palettes diverse
        lo = rng.uniform(0.0, 0.3, size=3)
        hi = rng.uniform(0.7, 1.0, size=3)
        img = lo + (hi - lo) * img
        img += rng.normal(0.0, rng.uniform(0.004, 0.012), size=img.shape)
        out.append((np.clip(img, 0, 1) * 255).round().astype(np.uint8))
    return out


def _random_crop(rng: np.random.Generator, source: np.ndarray, size: int) -> np.ndarray:
    h, w = source.shape[:2]
    if h < size or w < size:
        raise ValueError(f"source image {source.shape} smaller than crop size {size}")
    i = int(rng.integers(0, h - size + 1))
    j = int(rng.integers(0, w - size + 1))
    crop = source[i : i + size, j : j + size].astype(np.float64) / 255.0
    if rng.random() < 0.5:
        crop = crop[:, ::-1]
    return np.ascontiguousarray(crop)


def _coords(size: int):
    return np.meshgrid(np.arange(size), np.arange(size), indexing="ij")


def _rotated_offsets(rng, size: int):
    cy = rng.uniform(0.3, 0.7) * size
    cx = rng.uniform(0.3, 0.7) * size
    theta = rng.uniform(0, np.pi)
    yy, xx = _coords(size)
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    return u, v


def _draw_mask(rng: np.random.Generator, family: str, size: int, fraction: float) -> np.ndarray:
    aspect = rng.uniform(0.5, 2.0)
    if family == "ellipse":
        u, v = _rotated_offsets(rng, size)
        b = np.sqrt(fraction * size * size / (np.pi * aspect))
        a = aspect * b
        return ((u / a) ** 2 + (v / b) ** 2 <= 1.0).astype(np.uint8)
    if family == "rectangle":
        u, v = _rotated_offsets(rng, size)
        h = np.sqrt(fraction * size * size / aspect)
        w = aspect * h
        return ((np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)).astype(np.uint8)
    # polygon: convex-ish star of 5-9 vertices, filled analytically
    k = int(rng.integers(5, 10))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
    r0 = np.sqrt(fraction * size * size / np.pi)
    radii = r0 * rng.uniform(0.7, 1.3, size=k)
    cy = rng.uniform(0.35, 0.65) * size
    cx = rng.uniform(0.35, 0.65) * size
    ys = cy + radii * np.sin(angles)
    xs = cx + radii * np.cos(angles)
    yy, xx = _coords(size)
    inside = np.ones((size, size), dtype=bool)
    for i in range(k):
        y0, x0 = ys[i], xs[i]
        y1, x1 = ys[(i + 1) % k], xs[(i + 1) % k]
        # half-plane test against each edge (vertices are in CCW order)
        inside &= (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0) >= 0
    return inside.astype(np.uint8)


def _sample_mask(rng: np.random.Generator, recipe: BlendRecipe, size: int, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Returns (soft alpha, thresholded binary mask) honoring the area range."""
    lo, hi = recipe.area_range
    for _ in range(50):
        fraction = rng.uniform(lo, hi)
        hard = _draw_mask(rng, recipe.family, size, fraction)
        alpha = ndimage.gaussian_filter(hard.astype(np.float64), sigma) if sigma > 0 else hard.astype(np.float64)
        mask = (alpha > 0.5).astype(np.uint8)
        if lo <= mask.mean() <= hi:
            return alpha, mask
    raise DatasetError(
        f"could not draw a {recipe.family} mask with area in {recipe.area_range} after 50 attempts"
    )


def _donor(rng: np.random.Generator, recipe: BlendRecipe, base: np.ndarray,
           sources: list[np.ndarray], base_idx: int, size: int) -> np.ndarray:
    if recipe.donor == "other-image":
        choices = [i for i in range(len(sources)) if i != base_idx]
        pick = int(rng.choice(choices))
        return _random_crop(rng, sources[pick], size)
    s = recipe.jitter_strength
    scale = 1.0 + rng.uniform(-s, s, size=3)
    shift = rng.uniform(-s, s, size=3) * 0.25
    return np.clip(base * scale + shift, 0, 1)


def compose_fake(rng: np.random.Generator, recipe: BlendRecipe, base: np.ndarray,
                 sources: list[np.ndarray], base_idx: int) -> tuple[np.ndarray, np.ndarray]:
    """Blend a donor region into the base image; returns (image, binary mask)."""
    size = base.shape[0]
    donor = _donor(rng, recipe, base, sources, base_idx, size)
    alpha, mask = _sample_mask(rng, recipe, size, recipe.blur_sigma)
    image = alpha[..., None] * donor + (1.0 - alpha[..., None]) * base
    return image.astype(np.float64), mask


def _save_png(path: Path, array: np.ndarray) -> None:
    Image.fromarray(array).save(path, format="PNG")


def generate_dataset(sources: list[np.ndarray], recipe: BlendRecipe, n_real: int,
                     n_fake: int, seed: int, out_dir) -> Path:
    """Write images/, masks/ and a manifest; deterministic from the seed."""
    if len(sources) < 2:
        raise ValueError(f"need at least 2 source images, got {len(sources)}")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_real):
        idx = int(rng.integers(len(sources)))
        crop = _random_crop(rng, sources[idx], IMAGE_SIZE)
        name = f"real_{i:05d}.png"
        _save_png(out_dir / "images" / name, (crop * 255).round().astype(np.uint8))
        records.append({"file": f"images/{name}", "label": 0, "family": "real",
                        "mask": None, "seed": seed})
    for i in range(n_fake):
        idx = int(rng.integers(len(sources)))
        base = _random_crop(rng, sources[idx], IMAGE_SIZE)
        image, mask = compose_fake(rng, recipe, base, sources, idx)
        name = f"fake_{i:05d}.png"
        _save_png(out_dir / "images" / name, (image * 255).round().astype(np.uint8))
        _save_png(out_dir / "masks" / name, mask * 255)
        records.append({"file": f"images/{name}", "label": 1, "family": recipe.family,
                        "mask": f"masks/{name}", "seed": seed})
    manifest = out_dir / MANIFEST_NAME
    with manifest.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest


def _read_manifest(directory: Path) -> list[dict]:
    manifest = directory / MANIFEST_NAME
    if not manifest.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {directory}")
    records = []
    for line_no, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"corrupt manifest line {line_no}: {exc}") from exc
        for key in ("file", "label"):
            if key not in rec:
                raise DatasetError(f"manifest line {line_no} is missing {key!r}")
        if not (directory / rec["file"]).exists():
            raise DatasetError(f"missing image file {rec['file']} (manifest line {line_no})")
        if rec.get("mask") and not (directory / rec["mask"]).exists():
            raise DatasetError(f"missing mask file {rec['mask']} (manifest line {line_no})")
        records.append(rec)
    return records


def _load_sample(directory: Path, rec: dict) -> Sample:
    image = np.asarray(Image.open(directory / rec["file"]), dtype=np.float32) / 255.0
    mask = None
    if rec.get("mask"):
        raw = np.asarray(Image.open(directory / rec["mask"]))
        bad = set(np.unique(raw)) - {0, 255}
        if bad:
            raise DatasetError(f"mask {rec['mask']} is not binary: found values {sorted(bad)}")
        mask = (raw > 0).astype(np.uint8)
    return Sample(image=image, label=int(rec["label"]), mask=mask,
                  family=rec.get("family", "unknown"), name=rec["file"])


def load_dataset(directory, shuffle_seed: int | None = None):
    """Yield samples in manifest order (or shuffled); validates files first."""
    directory = Path(directory)
    records = _read_manifest(directory)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(records))
        records = [records[i] for i in order]
    for rec in records:
        yield _load_sample(directory, rec)
