"""Visual guide (object crop) and spatial guide (Gaussian location heatmap).

Images handed to the networks live in "network space": RGB scaled to [0,1]
with the dataset mean color subtracted, channels first.  The mean color is
therefore exactly 0 there, which is what the crop background is set to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import ndimage

from .autodiff.ops import resize_array
from .errors import EmptyMaskError

# ImageNet channel means, the usual VGG preprocessing constant.
MEAN_RGB = np.array([123.68, 116.78, 103.94]) / 255.0
SIGMA_FLOOR = 1.0


def to_network(image: np.ndarray) -> np.ndarray:
    """HxWx3 uint8 (or float in [0,1]) -> 3xHxW float32, mean subtracted."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    return (img - MEAN_RGB).transpose(2, 0, 1).astype(np.float32)


def from_network(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`to_network`, returned as HxWx3 float in [0,1]."""
    return np.asarray(x, dtype=np.float64).transpose(1, 2, 0) + MEAN_RGB


@dataclass(frozen=True)
class MaskStats:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    area: int


@dataclass
class SpatialGuide:
    heatmap: np.ndarray  # H x W, peak 1


@dataclass
class VisualGuide:
    image: np.ndarray  # 3 x R x R, network space (background == 0)
    mask: np.ndarray  # R x R, resampled object mask in [0,1]


def mask_stats(mask: np.ndarray, sigma_floor: float = SIGMA_FLOOR) -> MaskStats:
    ys, xs = np.nonzero(np.asarray(mask))
    if xs.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return MaskStats(
        mu_x=float(xs.mean()), mu_y=float(ys.mean()),
        sigma_x=max(float(xs.std()), sigma_floor), sigma_y=max(float(ys.std()), sigma_floor),
        area=int(xs.size),
    )


def gaussian_heatmap(stats: MaskStats, h: int, w: int) -> SpatialGuide:
    """Axis-aligned Gaussian with peak value 1 at (mu_x, mu_y)."""
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx = np.exp(-((xs - stats.mu_x) ** 2) / (2 * stats.sigma_x ** 2))
    gy = np.exp(-((ys - stats.mu_y) ** 2) / (2 * stats.sigma_y ** 2))
    m = np.maximum(np.outer(gy, gx), np.finfo(np.float32).tiny)
    return SpatialGuide(m.astype(np.float32))


def crop_box(mask: np.ndarray) -> tuple:
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return ys.min(), ys.max() + 1, xs.min(), xs.max() + 1


def crop_guide(image: np.ndarray, mask: np.ndarray, resolution: int) -> VisualGuide:
    """Tight crop around ``mask``, background set to the mean color, squashed to resolution^2.

    ``image`` is 3xHxW in network space (see :func:`to_network`).
    """
    mask = np.asarray(mask) > 0
    y0, y1, x0, x1 = crop_box(mask)
    m = mask[y0:y1, x0:x1]
    crop = np.where(m[None], image[:, y0:y1, x0:x1], 0.0)
    out = resize_array(crop, resolution, resolution).astype(np.float32)
    return VisualGuide(out, resize_array(m.astype(np.float64), resolution, resolution))


# ------------------------------------------------------------------ augmentation

@dataclass(frozen=True)
class VisualAug:
    scale: float = 1.0
    angle: float = 0.0  # degrees

    @property
    def identity(self) -> bool:
        return self.scale == 1.0 and self.angle == 0.0


def sample_visual_aug(rng: np.random.Generator, max_scale: float = 0.1, max_angle: float = 10.0) -> VisualAug:
    return VisualAug(float(rng.uniform(1 - max_scale, 1 + max_scale)),
                     float(rng.uniform(-max_angle, max_angle)))


def warp(image: np.ndarray, mask: np.ndarray, aug: VisualAug, center: tuple):
    """Scale and rotate image (3xHxW, network space) and mask about ``center`` (y, x).

    Bilinear resampling; samples falling outside the image read the mean color.
    """
    if aug.identity:
        return image, np.asarray(mask) > 0
    t = math.radians(aug.angle)
    # output -> input map: inverse rotation, then inverse scale
    rot = np.array([[math.cos(t), math.sin(t)], [-math.sin(t), math.cos(t)]]) / aug.scale
    c = np.asarray(center, dtype=np.float64)
    offset = c - rot @ c
    out = np.stack([ndimage.affine_transform(ch.astype(np.float64), rot, offset, order=1, cval=0.0)
                    for ch in image]).astype(np.float32)
    m = ndimage.affine_transform(np.asarray(mask, dtype=np.float64), rot, offset, order=1, cval=0.0)
    return out, m >= 0.5


def augment_visual(image: np.ndarray, mask: np.ndarray, rng: Optional[np.random.Generator],
                   resolution: int, aug: Optional[VisualAug] = None,
                   max_scale: float = 0.1, max_angle: float = 10.0) -> VisualGuide:
    """Random scale/rotation of the object about its box center, then :func:`crop_guide`."""
    if aug is None:
        aug = sample_visual_aug(rng, max_scale, max_angle)
    y0, y1, x0, x1 = crop_box(np.asarray(mask) > 0)
    center = ((y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0)
    img, m = warp(image, mask, aug, center)
    if not m.any():  # tiny objects can vanish under resampling
        img, m = image, np.asarray(mask) > 0
    return crop_guide(img, m, resolution)


@dataclass(frozen=True)
class SpatialAug:
    shift_x: float = 0.0  # fraction of the object extent
    shift_y: float = 0.0
    scale: float = 1.0


def sample_spatial_aug(rng: np.random.Generator, max_shift: float = 0.2, max_scale: float = 0.4) -> SpatialAug:
    return SpatialAug(float(rng.uniform(-max_shift, max_shift)),
                      float(rng.uniform(-max_shift, max_shift)),
                      float(rng.uniform(1 - max_scale, 1 + max_scale)))


def apply_spatial_aug(stats: MaskStats, aug: SpatialAug, image_size: tuple,
                      relative_to: str = "object", sigma_floor: float = SIGMA_FLOOR) -> MaskStats:
    """Shift the center by a fraction of the extent (2 sigma, or the image side) and rescale sigmas."""
    h, w = image_size
    if relative_to == "object":
        ex, ey = 2 * stats.sigma_x, 2 * stats.sigma_y
    elif relative_to == "image":
        ex, ey = float(w), float(h)
    else:
        raise ValueError(f"relative_to must be 'object' or 'image', got {relative_to!r}")
    mu_x = min(max(stats.mu_x + aug.shift_x * ex, 0.0), w - 1.0)
    mu_y = min(max(stats.mu_y + aug.shift_y * ey, 0.0), h - 1.0)
    return replace(stats, mu_x=mu_x, mu_y=mu_y,
                   sigma_x=max(stats.sigma_x * aug.scale, sigma_floor),
                   sigma_y=max(stats.sigma_y * aug.scale, sigma_floor))


def augment_spatial(stats: MaskStats, rng: Optional[np.random.Generator], image_size: tuple,
                    aug: Optional[SpatialAug] = None, max_shift: float = 0.2, max_scale: float = 0.4,
                    relative_to: str = "object") -> MaskStats:
    if aug is None:
        aug = sample_spatial_aug(rng, max_shift, max_scale)
    return apply_spatial_aug(stats, aug, image_size, relative_to)
