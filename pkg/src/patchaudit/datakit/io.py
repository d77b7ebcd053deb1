"""On-disk dataset format.

Layout under a dataset root:

    images/<id>.png    8-bit RGB
    masks/<id>.png     8-bit single channel of class ids
    manifest.jsonl     first line: dataset metadata; then one record per sample
    palette.json       class palette and target ids
    stats.json         normalization stats (written once fitted)

Ids are lowercase ASCII.  Labels are recomputed from masks on load and must
agree with the stored manifest; silent label drift would invalidate any
audit built on top.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image

from ..errors import DatasetError
from .manifest import DatasetManifest, SampleEntry
from .normalize import NormalizationStats
from .palette import ClassPalette, LabelRule, binary_label
from .scenegen import SceneSample

log = logging.getLogger(__name__)

FORMAT_ID = "patchaudit-dataset/1"


def image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.asarray(image) * 255.0).astype(np.uint8)


def uint8_to_image(raw: np.ndarray) -> np.ndarray:
    return raw.astype(np.float64) / 255.0


def save_dataset(
    samples: Iterable[SceneSample],
    out_dir: str | Path,
    palette: ClassPalette,
    label_rule: LabelRule,
    image_size: tuple[int, int],
    seed: int,
    entries: Iterable[SampleEntry] | None = None,
) -> DatasetManifest:
    """Stream samples to disk; returns the manifest (unsplit unless given)."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)

    collected: list[SampleEntry] = []
    for s in samples:
        if s.image_id != s.image_id.lower() or not s.image_id.isascii():
            raise DatasetError(f"image id {s.image_id!r} is not lowercase ASCII")
        Image.fromarray(image_to_uint8(s.image), mode="RGB").save(root / "images" / f"{s.image_id}.png")
        Image.fromarray(s.mask.astype(np.uint8), mode="L").save(root / "masks" / f"{s.image_id}.png")
        collected.append(
            SampleEntry(
                image_id=s.image_id,
                sequence_id=s.sequence_id,
                label=s.label,
                car_pixel_fraction=s.car_pixel_fraction,
            )
        )

    manifest = DatasetManifest(
        entries=tuple(entries) if entries is not None else tuple(collected),
        palette=palette,
        label_rule=label_rule,
        image_size=tuple(image_size),
        seed=seed,
    )
    write_manifest(root, manifest)
    with open(root / "palette.json", "w") as f:
        json.dump(palette.to_dict(), f, indent=2, sort_keys=True)
    return manifest


def write_manifest(root: str | Path, manifest: DatasetManifest) -> None:
    root = Path(root)
    meta = {
        "format": FORMAT_ID,
        "image_size": list(manifest.image_size),
        "seed": manifest.seed,
        "label_rule": manifest.label_rule.to_dict(),
    }
    with open(root / "manifest.jsonl", "w") as f:
        f.write(json.dumps(meta, sort_keys=True) + "\n")
        for e in manifest.entries:
            f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def save_stats(root: str | Path, stats: NormalizationStats) -> None:
    with open(Path(root) / "stats.json", "w") as f:
        json.dump(stats.to_dict(), f, indent=2, sort_keys=True)


def load_stats(root: str | Path) -> NormalizationStats | None:
    path = Path(root) / "stats.json"
    if not path.exists():
        return None
    with open(path) as f:
        return NormalizationStats.from_dict(json.load(f))


def load_image(root: str | Path, image_id: str) -> np.ndarray:
    path = Path(root) / "images" / f"{image_id}.png"
    if not path.exists():
        raise DatasetError(f"missing image file for {image_id}")
    return uint8_to_image(np.asarray(Image.open(path).convert("RGB")))


def load_mask(root: str | Path, image_id: str) -> np.ndarray:
    path = Path(root) / "masks" / f"{image_id}.png"
    if not path.exists():
        raise DatasetError(f"missing mask for image {image_id}")
    return np.asarray(Image.open(path)).astype(np.uint8)


def load_sample(root: str | Path, entry: SampleEntry, manifest: DatasetManifest) -> SceneSample:
    """Load and validate one sample; labels are recomputed, never trusted."""
    image = load_image(root, entry.image_id)
    mask = load_mask(root, entry.image_id)
    if image.shape[:2] != mask.shape:
        raise DatasetError(
            f"image/mask size mismatch for {entry.image_id}: "
            f"{image.shape[:2]} vs {mask.shape}"
        )
    if int(mask.max(initial=0)) >= manifest.palette.n_classes:
        raise DatasetError(
            f"mask for {entry.image_id} contains unknown class id {int(mask.max())}"
        )
    label, fraction = binary_label(mask, manifest.palette, manifest.label_rule)
    if label != entry.label:
        raise DatasetError(
            f"label mismatch for {entry.image_id}: stored {entry.label!r}, "
            f"recomputed {label!r} (car fraction {fraction:.4f})"
        )
    return SceneSample(
        image_id=entry.image_id,
        sequence_id=entry.sequence_id,
        image=image,
        mask=mask,
        label=label,
        car_pixel_fraction=fraction,
    )


def load_dataset(root: str | Path, validate_samples: bool = True) -> DatasetManifest:
    """Read a dataset directory back into a manifest.

    With validate_samples (the default) every sample is opened, size-checked
    and its label recomputed from the mask.
    """
    root = Path(root)
    manifest_path = root / "manifest.jsonl"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.jsonl under {root}")
    with open(root / "palette.json") as f:
        palette = ClassPalette.from_dict(json.load(f))
    with open(manifest_path) as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or lines[0].get("format") != FORMAT_ID:
        raise DatasetError(f"manifest at {root} has unknown format {lines[0].get('format') if lines else None!r}")
    meta = lines[0]
    manifest = DatasetManifest(
        entries=tuple(SampleEntry.from_dict(d) for d in lines[1:]),
        palette=palette,
        label_rule=LabelRule.from_dict(meta["label_rule"]),
        image_size=tuple(meta["image_size"]),
        seed=int(meta["seed"]),
    )
    manifest.check_split_hygiene()
    if validate_samples:
        for e in manifest.entries:
            load_sample(root, e, manifest)
    return manifest


def iter_split_samples(
    root: str | Path, manifest: DatasetManifest, split: str
) -> Iterator[SceneSample]:
    for e in manifest.split_entries(split):
        yield load_sample(root, e, manifest)


def load_split_arrays(
    root: str | Path, manifest: DatasetManifest, split: str
) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """(uint8 images N x H x W x 3, labels N in {0,1}, image ids) for a split."""
    entries = manifest.split_entries(split)
    if not entries:
        raise DatasetError(f"split {split!r} is empty")
    h, w = manifest.image_size
    images = np.empty((len(entries), h, w, 3), dtype=np.uint8)
    labels = np.empty(len(entries), dtype=np.int64)
    ids = []
    for i, e in enumerate(entries):
        sample = load_sample(root, e, manifest)
        if sample.image.shape[:2] != (h, w):
            raise DatasetError(
                f"{e.image_id} has size {sample.image.shape[:2]}, manifest says {(h, w)}"
            )
        images[i] = image_to_uint8(sample.image)
        labels[i] = 1 if sample.label == "positive" else 0
        ids.append(e.image_id)
    return images, labels, ids
