"""Dataset manifest and the sub-sequence level train/test split."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import ValidationError
from ..rngkit import substream
from .palette import DISCARDED, ClassPalette, LabelRule

log = logging.getLogger(__name__)

TRAIN = "train"
TEST = "test"


@dataclass(frozen=True)
class SampleEntry:
    image_id: str
    sequence_id: str
    label: str
    car_pixel_fraction: float
    split: str | None = None           # "train" | "test" | None (unassigned/discarded)
    subsequence_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "id": self.image_id,
            "sequence_id": self.sequence_id,
            "label": self.label,
            "car_pixel_fraction": self.car_pixel_fraction,
            "split": self.split,
            "subsequence_id": self.subsequence_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SampleEntry":
        return cls(
            image_id=str(d["id"]),
            sequence_id=str(d["sequence_id"]),
            label=str(d["label"]),
            car_pixel_fraction=float(d["car_pixel_fraction"]),
            split=d.get("split"),
            subsequence_id=d.get("subsequence_id"),
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Index of one dataset: samples, palette, label rule, geometry, seed."""

    entries: tuple[SampleEntry, ...]
    palette: ClassPalette
    label_rule: LabelRule
    image_size: tuple[int, int]
    seed: int

    def split_entries(self, split: str) -> list[SampleEntry]:
        return [e for e in self.entries if e.split == split]

    def entry(self, image_id: str) -> SampleEntry:
        for e in self.entries:
            if e.image_id == image_id:
                return e
        raise KeyError(image_id)

    def check_split_hygiene(self) -> None:
        """No sub-sequence may straddle train and test; discarded stay out."""
        seen: dict[str, str] = {}
        for e in self.entries:
            if e.label == DISCARDED and e.split is not None:
                raise ValidationError(f"discarded sample {e.image_id} is in split {e.split}")
            if e.split is None or e.subsequence_id is None:
                continue
            prev = seen.setdefault(e.subsequence_id, e.split)
            if prev != e.split:
                raise ValidationError(
                    f"sub-sequence {e.subsequence_id} appears in both {prev} and {e.split}"
                )


def split_dataset(
    manifest: DatasetManifest,
    train_fraction: float = 0.8,
    n_subsequences: int = 3,
    seed: int = 0,
) -> DatasetManifest:
    """Assign whole contiguous sub-sequences to train or test.

    Each sequence is cut into `n_subsequences` equal-as-possible contiguous
    chunks; chunks are shuffled with a seeded RNG and assigned at
    train_fraction : 1 - train_fraction.  Discarded samples stay unassigned.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if n_subsequences < 1:
        raise ValidationError(f"n_subsequences must be >= 1, got {n_subsequences}")

    by_sequence: dict[str, list[SampleEntry]] = {}
    for e in manifest.entries:
        by_sequence.setdefault(e.sequence_id, []).append(e)

    chunks: list[tuple[str, list[SampleEntry]]] = []
    for seq_id in sorted(by_sequence):
        frames = sorted(by_sequence[seq_id], key=lambda e: e.image_id)
        if len(frames) < n_subsequences:
            log.warning(
                "sequence %s has %d frames < %d sub-sequences; assigning it whole",
                seq_id, len(frames), n_subsequences,
            )
            chunks.append((f"{seq_id}_s0", frames))
            continue
        bounds = np.linspace(0, len(frames), n_subsequences + 1).astype(int)
        for k in range(n_subsequences):
            chunks.append((f"{seq_id}_s{k}", frames[bounds[k]:bounds[k + 1]]))

    n_train = int(round(train_fraction * len(chunks)))
    if n_train == len(chunks) or n_train == 0:
        raise ValidationError(
            f"train_fraction {train_fraction} leaves an empty split over {len(chunks)} sub-sequences"
        )
    rng = substream(seed, "split")
    order = rng.permutation(len(chunks))
    assignment: dict[str, str] = {}
    for rank, idx in enumerate(order):
        assignment[chunks[idx][0]] = TRAIN if rank < n_train else TEST

    by_id: dict[str, tuple[str, str]] = {}
    for sub_id, frames in chunks:
        for e in frames:
            by_id[e.image_id] = (sub_id, assignment[sub_id])

    new_entries = []
    for e in manifest.entries:
        sub_id, split = by_id[e.image_id]
        if e.label == DISCARDED:
            new_entries.append(replace(e, split=None, subsequence_id=sub_id))
        else:
            new_entries.append(replace(e, split=split, subsequence_id=sub_id))
    out = replace(manifest, entries=tuple(new_entries))
    out.check_split_hygiene()
    return out
