"""Resizing and per-channel normalization of model inputs.

Images are resized bilinearly, masks with nearest-neighbor so class ids
stay valid.  Normalization stats are fitted on the train split only and
applied as (x - mean) / std per channel; a zero-variance channel gets its
std clamped to 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import cv2
import numpy as np

from ..errors import ValidationError

STD_EPS = 1e-6


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(mean=tuple(float(v) for v in d["mean"]), std=tuple(float(v) for v in d["std"]))


def resize_image(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an H x W x 3 image to (H', W')."""
    h, w = size
    if image.shape[:2] == (h, w):
        return image
    return cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize of a class-id mask; never invents new ids."""
    h, w = size
    if mask.shape == (h, w):
        return mask
    return cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)


def fit_normalization(images: Iterable[np.ndarray]) -> NormalizationStats:
    """Per-channel mean/std over [0,1] images, accumulated in float64."""
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    count = 0
    for image in images:
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValidationError(f"expected H x W x 3 image, got shape {image.shape}")
        flat = image.reshape(-1, 3).astype(np.float64)
        total += flat.sum(axis=0)
        total_sq += (flat * flat).sum(axis=0)
        count += flat.shape[0]
    if count == 0:
        raise ValidationError("cannot fit normalization on an empty image set")
    mean = total / count
    var = np.maximum(total_sq / count - mean * mean, 0.0)
    std = np.maximum(np.sqrt(var), STD_EPS)
    return NormalizationStats(mean=tuple(mean.tolist()), std=tuple(std.tolist()))


def normalize(image: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """(x - mean) / std per channel; returns float32."""
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    return (image.astype(np.float32) - mean) / std


def normalize_batch(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Vectorized normalize over an N x H x W x 3 stack."""
    mean = np.asarray(stats.mean, dtype=np.float32)
    std = np.asarray(stats.std, dtype=np.float32)
    return (images.astype(np.float32) - mean) / std
