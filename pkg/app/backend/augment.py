"""Multi-crop DINO augmentation of a single 3-channel slice."""
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageOps

from app.config import DinoConfig

MAX_CROP_TRIES = 10
LOG_RATIO = (math.log(3 / 4), math.log(4 / 3))
_ROTATIONS = (Image.Transpose.ROTATE_90, Image.Transpose.ROTATE_180, Image.Transpose.ROTATE_270)


@dataclass(frozen=True)
class Crop:
    pixels: np.ndarray  # (3, size, size) float32 in [0, 1]
    area_fraction: float
    is_global: bool


def _to_pil(image: np.ndarray) -> Image.Image:
    array = np.clip(image, 0.0, 1.0).transpose(1, 2, 0)
    return Image.fromarray(np.round(array * 255.0).astype(np.uint8))


def _from_pil(image: Image.Image) -> np.ndarray:
    return (np.asarray(image, dtype=np.float32) / 255.0).transpose(2, 0, 1).copy()


def sample_crop_box(
        rng: np.random.Generator,
        height: int,
        width: int,
        area_range: tuple[float, float],
) -> tuple[int, int, int, int]:
    """Random resized crop box (top, left, h, w) whose area fraction lies in area_range."""
    total = height * width
    lo, hi = area_range
    for _ in range(MAX_CROP_TRIES):
        target = rng.uniform(lo, hi) * total
        ratio = math.exp(rng.uniform(*LOG_RATIO))
        w = int(round(math.sqrt(target * ratio)))
        h = int(round(math.sqrt(target / ratio)))
        if 0 < w <= width and 0 < h <= height and lo <= h * w / total <= hi:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    # centred fallback of the mid-range area, as square as the image allows
    area = (lo + hi) / 2 * total
    w = min(width, max(1, int(round(math.sqrt(area)))))
    h = min(height, max(1, math.ceil(lo * total / w), int(round(area / w))))
    if h * w < lo * total:
        w = min(width, math.ceil(lo * total / h))
    if h * w > hi * total:
        h = max(1, math.floor(hi * total / w))
    return (height - h) // 2, (width - w) // 2, h, w


def _photometric(image: Image.Image, rng: np.random.Generator) -> Image.Image:
    if rng.random() < 0.5:
        image = image.transpose(_ROTATIONS[int(rng.integers(len(_ROTATIONS)))])
    if rng.random() < 0.5:
        image = ImageOps.autocontrast(image)
    if rng.random() < 0.5:
        image = ImageOps.equalize(image)
    return image


def dino_augment(
        image: np.ndarray,
        rng: np.random.Generator,
        config: DinoConfig,
        output_size: int,
) -> list[Crop]:
    """n_global crops then n_local crops, each resized to output_size.

    Every crop gets a random 90-degree rotation, auto-contrast and equalisation,
    each with probability 0.5.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a 3 x H x W slice, got {image.shape}")
    _, height, width = image.shape
    source = _to_pil(image)
    crops = []
    plan = [(config.global_area, True)] * config.n_global + [(config.local_area, False)] * config.n_local
    for area_range, is_global in plan:
        top, left, h, w = sample_crop_box(rng, height, width, area_range)
        crop = source.resize(
            (output_size, output_size), Image.Resampling.BILINEAR, box=(left, top, left + w, top + h)
        )
        crop = _photometric(crop, rng)
        crops.append(Crop(_from_pil(crop), h * w / (height * width), is_global))
    return crops
