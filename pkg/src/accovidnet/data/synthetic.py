"""Synthetic three-class shape dataset standing in for COVIDx at desk scale.

Class 0 draws filled circles, class 1 filled squares, class 2 crosses, each
with a random centre offset, scale and additive Gaussian noise.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import Manifest, ManifestEntry, write_manifest

SHAPES = ("circle", "square", "cross")
BACKGROUND = 0.1
FOREGROUND = 0.9
NOISE_STD = 0.05
MAX_OFFSET = 0.04  # fraction of the image side
SCALE_RANGE = (0.26, 0.30)  # shape half-extent as a fraction of the side


def train_count(per_class: int) -> int:
    """Training images per class under the 75/25 split."""
    return per_class - max(1, per_class // 4)


def render_shape(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``size x size`` grayscale image in [0, 1]."""
    cy, cx = size / 2 + rng.uniform(-MAX_OFFSET, MAX_OFFSET, 2) * size
    r = rng.uniform(*SCALE_RANGE) * size
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if label == 0:
        mask = dy**2 + dx**2 <= r**2
    elif label == 1:
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif label == 2:
        bar = 0.3 * r
        mask = ((np.abs(dy) <= bar) & (np.abs(dx) <= r)) | ((np.abs(dx) <= bar) & (np.abs(dy) <= r))
    else:
        raise ValueError(f"label must be 0, 1 or 2, got {label}")
    img = np.where(mask, FOREGROUND, BACKGROUND) + rng.normal(0.0, NOISE_STD, (size, size))
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(
    out_dir: str | os.PathLike,
    per_class: int = 64,
    size: int = 32,
    seed: int = 0,
) -> Manifest:
    """Write ``per_class`` PNGs per class plus ``manifest.csv`` under ``out_dir``."""
    if per_class < 4:
        raise ValueError(f"per_class must be at least 4, got {per_class}")
    out = Path(out_dir)
    image_dir = out / "images"
    rng = np.random.default_rng(seed)
    n_train = train_count(per_class)
    entries = []
    for label, shape in enumerate(SHAPES):
        (image_dir / shape).mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            img = render_shape(label, size, rng)
            rel = Path("images") / shape / f"{shape}_{i:04d}.png"
            Image.fromarray(np.round(img * 255).astype(np.uint8), mode="L").save(out / rel)
            split = "train" if i < n_train else "test"
            entries.append(ManifestEntry(rel.as_posix(), label, split))
    manifest = Manifest(entries, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest



