"""Procedural cardiac phantoms, preprocessing, and the dataset container.

A phantom is a short-axis-like slice: noisy dark background, a mid-intensity
myocardium annulus, and a bright blood-pool disk, with randomized geometry
and a small blur so edges stay soft. Every image is a pure function of its
seed, and splits take disjoint seed ranges so they can never overlap.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, GenspecError

MAGIC = b"GMZD"
VERSION = 1

# split -> first seed; ranges are 1e6 wide, far beyond any desk-scale count
SPLIT_SEED_BASE = {"train": 0, "val": 1_000_000, "test": 2_000_000}


@dataclass
class Dataset:
    images: np.ndarray  # (N, size, size) float64 in [0, 1]
    split: str = ""
    seed: int = 0

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return self.images.shape[1]


def generate_phantom(seed: int, size: int = 32) -> np.ndarray:
    """Render one phantom image, (size, size) float64 in [0, 1]."""
    if size < 16:
        raise GenspecError(f"phantom size must be at least 16 pixels, got {size}")
    rng = np.random.default_rng(seed)

    bg_level = rng.uniform(0.05, 0.15)
    bg_noise = rng.uniform(0.01, 0.03)
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    r_out = rng.uniform(0.26, 0.36) * size
    r_in = r_out * rng.uniform(0.45, 0.65)
    myo_level = rng.uniform(0.35, 0.55)
    pool_level = rng.uniform(0.75, 0.95)
    ecc = rng.uniform(0.0, 0.15)
    theta = rng.uniform(0.0, np.pi)

    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = np.sqrt((u / (1.0 + ecc)) ** 2 + (v / (1.0 - ecc)) ** 2)

    img = rng.normal(bg_level, bg_noise, size=(size, size))
    img = np.where(r <= r_out, myo_level, img)
    img = np.where(r <= r_in, pool_level, img)
    img = _binomial_blur(img)
    return np.clip(img, 0.0, 1.0)


def _binomial_blur(img: np.ndarray) -> np.ndarray:
    """Separable 3x3 binomial ([1,2,1]/4 per axis) with edge padding."""
    p = np.pad(img, 1, mode="edge")
    h = (p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:]) / 4.0
    return (h[:-2] + 2.0 * h[1:-1] + h[2:]) / 4.0


def phantom_region_masks(seed: int, size: int = 32) -> dict[str, np.ndarray]:
    """Boolean masks for the regions of the phantom drawn from `seed`.

    Replays the geometry draws (same rng consumption order as
    generate_phantom) without rendering; used by tests as a region oracle.
    """
    rng = np.random.default_rng(seed)
    rng.uniform(0.05, 0.15)
    rng.uniform(0.01, 0.03)
    cx = size / 2 + rng.uniform(-0.1, 0.1) * size
    cy = size / 2 + rng.uniform(-0.1, 0.1) * size
    r_out = rng.uniform(0.26, 0.36) * size
    r_in = r_out * rng.uniform(0.45, 0.65)
    rng.uniform(0.35, 0.55)
    rng.uniform(0.75, 0.95)
    ecc = rng.uniform(0.0, 0.15)
    theta = rng.uniform(0.0, np.pi)

    ys, xs = np.mgrid[0:size, 0:size]
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    r = np.sqrt((u / (1.0 + ecc)) ** 2 + (v / (1.0 - ecc)) ** 2)
    return {
        "pool": r <= r_in,
        "annulus": (r > r_in) & (r <= r_out),
        "background": r > r_out + 2,  # margin keeps blurred edges out
    }


def center_crop(image: np.ndarray, target: int) -> np.ndarray:
    h, w = image.shape[-2:]
    if target > min(h, w):
        raise GenspecError(f"crop target {target} exceeds image extent {image.shape}")
    oy = (h - target) // 2
    ox = (w - target) // 2
    return image[..., oy : oy + target, ox : ox + target]


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Independent 50% horizontal and 50% vertical flips."""
    out = image
    if rng.random() < 0.5:
        out = out[..., :, ::-1]
    if rng.random() < 0.5:
        out = out[..., ::-1, :]
    return np.ascontiguousarray(out)


def make_dataset(split: str, count: int, size: int = 32, base_seed: int | None = None) -> Dataset:
    """Generate `count` phantoms from the split's disjoint seed range."""
    if base_seed is None:
        if split not in SPLIT_SEED_BASE:
            raise GenspecError(f"unknown split {split!r}; expected one of {sorted(SPLIT_SEED_BASE)}")
        base_seed = SPLIT_SEED_BASE[split]
    ranges = sorted(SPLIT_SEED_BASE.values())
    span = ranges[1] - ranges[0]
    if count > span:
        raise GenspecError(f"count {count} would overflow the split seed range of {span}")
    images = np.stack([generate_phantom(base_seed + i, size) for i in range(count)])
    return Dataset(images=images, split=split, seed=base_seed)


def save_dataset(ds: Dataset, path: str) -> None:
    images = np.asarray(ds.images, dtype=np.float64)
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise GenspecError(f"dataset images must be (N, size, size), got {images.shape}")
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise GenspecError("dataset pixels must lie in [0, 1]")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<III", VERSION, images.shape[0], images.shape[1]))
        f.write(images.astype("<f8").tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"bad dataset magic {blob[:4]!r} at byte offset 0 in {path}")
    if len(blob) < 16:
        raise FormatError(f"dataset header truncated at byte offset {len(blob)} in {path}")
    version, count, size = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version} at byte offset 4 in {path}")
    expected = 16 + 8 * count * size * size
    if len(blob) != expected:
        raise FormatError(
            f"dataset payload truncated: expected {expected} bytes, file ends at byte offset {len(blob)} in {path}"
        )
    pixels = np.frombuffer(blob, dtype="<f8", offset=16).reshape(count, size, size)
    bad = np.flatnonzero((pixels < 0.0) | (pixels > 1.0))
    if bad.size:
        raise FormatError(
            f"pixel value {pixels.reshape(-1)[bad[0]]!r} out of [0,1] at byte offset {16 + 8 * int(bad[0])} in {path}"
        )
    return Dataset(images=pixels.astype(np.float64).reshape(count, size, size))
