"""Segmentation class palette and the binary label rule derived from it."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError

# Label values used throughout the package.
POSITIVE = "positive"
NEGATIVE = "negative"
DISCARDED = "discarded"
LABELS = (POSITIVE, NEGATIVE, DISCARDED)

# Default palette class ids.
ROAD, SKY, CAR, BUILDING, NATURE, OBSTACLE, CURB = range(7)


@dataclass(frozen=True)
class ClassPalette:
    """Ordered segmentation classes plus the subset counted as the target."""

    entries: tuple[tuple[int, str], ...]
    target_class_ids: frozenset[int]

    def __post_init__(self):
        ids = [cid for cid, _ in self.entries]
        if ids != list(range(len(ids))):
            raise ValidationError(f"class ids must be unique and contiguous from 0, got {ids}")
        if not self.target_class_ids:
            raise ValidationError("target_class_ids must be non-empty")
        if not self.target_class_ids <= set(ids):
            raise ValidationError(
                f"target ids {sorted(self.target_class_ids)} not a subset of {ids}"
            )

    @property
    def n_classes(self) -> int:
        return len(self.entries)

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.entries)

    def name_of(self, class_id: int) -> str:
        return self.entries[class_id][1]

    def is_target(self, class_id: int) -> bool:
        return class_id in self.target_class_ids

    def to_dict(self) -> dict:
        return {
            "classes": [{"id": cid, "name": name} for cid, name in self.entries],
            "target_class_ids": sorted(self.target_class_ids),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassPalette":
        entries = tuple((int(c["id"]), str(c["name"])) for c in d["classes"])
        return cls(entries=entries, target_class_ids=frozenset(int(i) for i in d["target_class_ids"]))

    @classmethod
    def default(cls) -> "ClassPalette":
        return cls(
            entries=(
                (ROAD, "road"),
                (SKY, "sky"),
                (CAR, "car"),
                (BUILDING, "building"),
                (NATURE, "nature"),
                (OBSTACLE, "obstacle_trash"),
                (CURB, "curb"),
            ),
            target_class_ids=frozenset({CAR}),
        )


@dataclass(frozen=True)
class LabelRule:
    """Pixel-fraction thresholds mapping a mask to a binary label.

    An image is positive when at least `positive_min_fraction` of its pixels
    belong to a target class, negative when at most `negative_max_fraction`
    do, and discarded in between.
    """

    positive_min_fraction: float = 0.02
    negative_max_fraction: float = 0.003

    def __post_init__(self):
        if not (0.0 <= self.negative_max_fraction < self.positive_min_fraction <= 1.0):
            raise ValidationError(
                "need 0 <= negative_max_fraction < positive_min_fraction <= 1, got "
                f"{self.negative_max_fraction} / {self.positive_min_fraction}"
            )

    def to_dict(self) -> dict:
        return {
            "positive_min_fraction": self.positive_min_fraction,
            "negative_max_fraction": self.negative_max_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelRule":
        return cls(
            positive_min_fraction=float(d["positive_min_fraction"]),
            negative_max_fraction=float(d["negative_max_fraction"]),
        )


def target_pixel_fraction(mask: np.ndarray, palette: ClassPalette) -> float:
    """Fraction of mask pixels belonging to any target class."""
    if mask.ndim != 2:
        raise ValidationError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.size == 0:
        raise ValidationError("mask is empty")
    if int(mask.min()) < 0 or int(mask.max()) >= palette.n_classes:
        raise ValidationError(
            f"mask contains class ids outside [0, {palette.n_classes - 1}]"
        )
    hit = np.isin(mask, sorted(palette.target_class_ids))
    return float(np.count_nonzero(hit)) / float(mask.size)


def binary_label(mask: np.ndarray, palette: ClassPalette, rule: LabelRule) -> tuple[str, float]:
    """Label a mask as positive/negative/discarded; returns (label, fraction)."""
    fraction = target_pixel_fraction(mask, palette)
    if fraction >= rule.positive_min_fraction:
        return POSITIVE, fraction
    if fraction <= rule.negative_max_fraction:
        return NEGATIVE, fraction
    return DISCARDED, fraction
