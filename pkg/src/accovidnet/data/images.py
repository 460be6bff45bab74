"""Image decoding, resizing and train-time augmentation."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from ..errors import IngestionError


@dataclass(frozen=True)
class ImageRecord:
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    label: int | None = None
    source_path: str = ""


def bilinear_resize(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centred bilinear resize of an ``(H, W, C)`` array."""
    h, w = size
    if pixels.shape[:2] == (h, w):
        return pixels.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float64)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False, antialias=False)
    return out[0].permute(1, 2, 0).numpy().astype(np.float32)


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                scale = 65535.0 if im.mode.startswith("I;16") else max(float(arr.max()), 1.0)
                gray = np.clip(arr / scale, 0.0, 1.0)
                return np.repeat(gray[..., None], 3, axis=2)
            if im.mode == "F":
                gray = np.clip(np.asarray(im, dtype=np.float64), 0.0, 1.0)
                return np.repeat(gray[..., None], 3, axis=2)
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise IngestionError(f"cannot decode image {path}: {exc}") from exc


def preprocess(
    path: str | os.PathLike,
    size: tuple[int, int] | int = (224, 224),
    label: int | None = None,
) -> ImageRecord:
    """Decode to 3 channels, resize bilinearly to ``size`` and scale into [0, 1]."""
    if isinstance(size, int):
        size = (size, size)
    path = Path(path)
    pixels = bilinear_resize(_decode(path), size)
    np.clip(pixels, 0.0, 1.0, out=pixels)
    return ImageRecord(pixels=pixels, label=label, source_path=str(path))


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    flip_prob: float = 0.5
    max_rotation_deg: float = 10.0
    brightness: float = 0.1


def augment(record: ImageRecord, rng: np.random.Generator, config: AugmentConfig | None = None) -> ImageRecord:
    """Random horizontal flip, small rotation and brightness scaling.

    The three random draws are always taken in the same order, so the stream
    of a seeded generator does not depend on which transforms fire.
    """
    config = config or AugmentConfig()
    if not config.enabled:
        return record
    flip = rng.random() < config.flip_prob
    angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
    gain = 1.0 + rng.uniform(-config.brightness, config.brightness)

    x = record.pixels
    if flip:
        x = x[:, ::-1, :]
    if angle != 0.0:
        x = ndimage.rotate(x, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    if gain != 1.0:
        x = x * gain
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    return replace(record, pixels=np.ascontiguousarray(x))
