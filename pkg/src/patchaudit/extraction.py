"""Finding shortcut patch candidates from the proxy's heatmaps.

A patch logit table pairs every heatmap cell of a dataset split with the
semantic class of its pixel window.  Cells whose logit exceeds the 99%
nearest-rank quantile but whose window holds no target-class pixel are the
shortcut candidates; a seeded draw from the 50% quantile band provides the
random baseline.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np

from .datakit import (
    NEGATIVE,
    ClassPalette,
    DatasetManifest,
    image_to_uint8,
    load_sample,
    normalize_batch,
)
from .errors import DatasetError, ValidationError
from .grid import GridGeometry
from .proxynet import LocalPatchNet, heatmap_batch
from .rngkit import substream

log = logging.getLogger(__name__)

TAG_SHORTCUT = "shortcut"
TAG_RANDOM = "random"
TAG_SHUFFLED = "shortcut_shuffled"
TAG_MEAN = "shortcut_mean"
SET_TAGS = (TAG_SHORTCUT, TAG_RANDOM, TAG_SHUFFLED, TAG_MEAN)


@dataclass(frozen=True)
class PatchRef:
    """One located patch: grid cell, pixel window, logit, semantic class."""

    image_id: str
    row: int
    col: int
    bbox: tuple[int, int, int, int]      # top, left, height, width
    logit: float
    class_id: int
    set_tag: str

    def key(self) -> tuple[str, int, int]:
        return (self.image_id, self.row, self.col)

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "row": self.row,
            "col": self.col,
            "bbox": list(self.bbox),
            "logit": self.logit,
            "class_id": self.class_id,
            "set_tag": self.set_tag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchRef":
        return cls(
            image_id=str(d["image_id"]),
            row=int(d["row"]),
            col=int(d["col"]),
            bbox=tuple(int(v) for v in d["bbox"]),
            logit=float(d["logit"]),
            class_id=int(d["class_id"]),
            set_tag=str(d["set_tag"]),
        )


@dataclass
class PatchLogitTable:
    """Parallel columns over all (image, cell) pairs of one split."""

    image_ids: list[str]
    rows: np.ndarray        # int32
    cols: np.ndarray        # int32
    logits: np.ndarray      # float64
    class_ids: np.ndarray   # int32
    geometry: GridGeometry
    split: str = "test"

    def __len__(self) -> int:
        return len(self.image_ids)

    def check(self) -> None:
        n_cells = self.geometry.n_cells
        counts: dict[str, int] = {}
        seen = set()
        for i, iid in enumerate(self.image_ids):
            counts[iid] = counts.get(iid, 0) + 1
            key = (iid, int(self.rows[i]), int(self.cols[i]))
            if key in seen:
                raise ValidationError(f"duplicate patch row {key}")
            seen.add(key)
        for iid, c in counts.items():
            if c != n_cells:
                raise ValidationError(f"image {iid} has {c} rows, expected {n_cells}")

    def patch_ref(self, index: int, tag: str) -> PatchRef:
        row, col = int(self.rows[index]), int(self.cols[index])
        top, left, ph, pw = self.geometry.cell_window(row, col)
        return PatchRef(
            image_id=self.image_ids[index],
            row=row,
            col=col,
            bbox=(top, left, ph, pw),
            logit=float(self.logits[index]),
            class_id=int(self.class_ids[index]),
            set_tag=tag,
        )

    def save_csv(self, path: str | Path) -> None:
        path = Path(path)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image_id", "row", "col", "logit", "class_id"])
            for i in range(len(self)):
                writer.writerow([
                    self.image_ids[i], int(self.rows[i]), int(self.cols[i]),
                    repr(float(self.logits[i])), int(self.class_ids[i]),
                ])
        with open(path.with_suffix(".meta.json"), "w") as f:
            json.dump({"geometry": self.geometry.to_dict(), "split": self.split},
                      f, indent=2, sort_keys=True)

    @classmethod
    def load_csv(cls, path: str | Path) -> "PatchLogitTable":
        path = Path(path)
        with open(path.with_suffix(".meta.json")) as f:
            meta = json.load(f)
        image_ids, rows, cols, logits, class_ids = [], [], [], [], []
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            if header != ["image_id", "row", "col", "logit", "class_id"]:
                raise ValidationError(f"unexpected patch table header {header}")
            for rec in reader:
                image_ids.append(rec[0])
                rows.append(int(rec[1]))
                cols.append(int(rec[2]))
                logits.append(float(rec[3]))
                class_ids.append(int(rec[4]))
        return cls(
            image_ids=image_ids,
            rows=np.asarray(rows, dtype=np.int32),
            cols=np.asarray(cols, dtype=np.int32),
            logits=np.asarray(logits, dtype=np.float64),
            class_ids=np.asarray(class_ids, dtype=np.int32),
            geometry=GridGeometry.from_dict(meta["geometry"]),
            split=meta["split"],
        )


def downsample_mask(mask: np.ndarray, geometry: GridGeometry, palette: ClassPalette) -> np.ndarray:
    """Per-cell semantic class with target override.

    A cell containing any target-class pixel counts as that target class;
    otherwise the majority class in the window wins, ties broken toward the
    lowest class id.
    """
    if mask.shape != (geometry.height, geometry.width):
        raise ValidationError(
            f"mask shape {mask.shape} does not match geometry "
            f"{(geometry.height, geometry.width)}"
        )
    gh, gw = geometry.shape
    out = np.empty((gh, gw), dtype=np.int32)
    targets = sorted(palette.target_class_ids)
    for i in range(gh):
        for j in range(gw):
            top, left, h, w = geometry.cell_window(i, j)
            window = mask[top:top + h, left:left + w]
            counts = np.bincount(window.ravel(), minlength=palette.n_classes)
            hit = [t for t in targets if counts[t] > 0]
            if hit:
                out[i, j] = hit[0]
            else:
                out[i, j] = int(np.argmax(counts))
    return out


def collect_patch_logits(
    model: LocalPatchNet,
    root: str | Path,
    manifest: DatasetManifest,
    stats,
    split: str = "test",
    batch_size: int = 32,
) -> PatchLogitTable:
    """One heatmap per split image, paired with downsampled mask classes."""
    entries = sorted(manifest.split_entries(split), key=lambda e: e.image_id)
    if not entries:
        raise DatasetError(f"split {split!r} is empty")
    h, w = manifest.image_size
    geometry = GridGeometry(model.config.receptive_field, model.config.stride, h, w)
    gh, gw = geometry.shape
    grid_rows, grid_cols = np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij")

    image_ids: list[str] = []
    rows, cols, logits, class_ids = [], [], [], []
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        images = np.empty((len(chunk), h, w, 3), dtype=np.float32)
        for k, e in enumerate(chunk):
            sample = load_sample(root, e, manifest)
            if sample.image.shape[:2] != (h, w):
                raise DatasetError(
                    f"{e.image_id}: size {sample.image.shape[:2]} incompatible with grid geometry"
                )
            images[k] = sample.image.astype(np.float32)
            cell_classes = downsample_mask(sample.mask, geometry, manifest.palette)
            image_ids.extend([e.image_id] * (gh * gw))
            rows.append(grid_rows.ravel())
            cols.append(grid_cols.ravel())
            class_ids.append(cell_classes.ravel())
        maps = heatmap_batch(model, normalize_batch(images, stats))
        logits.append(maps.reshape(len(chunk), -1).astype(np.float64).ravel())

    table = PatchLogitTable(
        image_ids=image_ids,
        rows=np.concatenate(rows).astype(np.int32),
        cols=np.concatenate(cols).astype(np.int32),
        logits=np.concatenate(logits),
        class_ids=np.concatenate(class_ids).astype(np.int32),
        geometry=geometry,
        split=split,
    )
    table.check()
    return table


def logit_quantile(values, q: float) -> float:
    """Empirical nearest-rank quantile: sorted[ceil(q * n) - 1].

    The rank is computed with exact rational arithmetic so float rounding
    never shifts the index.
    """
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise ValidationError("cannot take a quantile of an empty table")
    if not 0.0 < q < 1.0:
        raise ValidationError(f"quantile q must be in (0, 1), got {q}")
    rank = int(math.ceil(Fraction(q) * arr.size))
    return float(np.sort(arr)[rank - 1])


def quantile_band(values, low_q: float = 0.50, high_q: float = 0.51) -> tuple[float, float]:
    if not low_q < high_q:
        raise ValidationError(f"band quantiles must satisfy low < high, got {low_q}, {high_q}")
    return logit_quantile(values, low_q), logit_quantile(values, high_q)


def in_band(logits: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    """Membership in [low, high); degenerates to equality when low == high."""
    low, high = band
    if high > low:
        return (logits >= low) & (logits < high)
    return logits == low


def find_shortcuts(table: PatchLogitTable, threshold: float, palette: ClassPalette) -> list[PatchRef]:
    """Cells with logit strictly above threshold whose class is off-target."""
    non_target = ~np.isin(table.class_ids, sorted(palette.target_class_ids))
    picked = np.nonzero((table.logits > threshold) & non_target)[0]
    patches = [table.patch_ref(int(i), TAG_SHORTCUT) for i in picked]
    if not patches:
        log.warning("no shortcut patches above threshold %.6f; model may be shortcut-free", threshold)
    return sorted(patches, key=lambda p: p.key())


def sample_random_patches(
    table: PatchLogitTable,
    band: tuple[float, float],
    palette: ClassPalette,
    shortcut_patches: list[PatchRef],
    rng_seed: int,
) -> tuple[list[PatchRef], list[str]]:
    """Seeded per-image draw from the band, matched to shortcut cardinality.

    Only images that contributed shortcut patches are used; an image without
    any in-band off-target patch is skipped and reported.
    """
    per_image: dict[str, int] = {}
    for p in shortcut_patches:
        per_image[p.image_id] = per_image.get(p.image_id, 0) + 1

    ids = np.asarray(table.image_ids)
    non_target = ~np.isin(table.class_ids, sorted(palette.target_class_ids))
    banded = in_band(table.logits, band) & non_target

    picked: list[PatchRef] = []
    skipped: list[str] = []
    for image_id in sorted(per_image):
        candidates = np.nonzero(banded & (ids == image_id))[0]
        if candidates.size == 0:
            log.info("image %s has no in-band off-target patch; skipped for the random set", image_id)
            skipped.append(image_id)
            continue
        want = min(per_image[image_id], candidates.size)
        rng = substream(rng_seed, "sampling", image_id)
        chosen = rng.choice(candidates, size=want, replace=False)
        picked.extend(table.patch_ref(int(i), TAG_RANDOM) for i in sorted(chosen.tolist()))
    return sorted(picked, key=lambda p: p.key()), skipped


def random_origin_expectation(
    table: PatchLogitTable,
    band: tuple[float, float],
    palette: ClassPalette,
    shortcut_patches: list[PatchRef],
) -> dict[tuple[int, int], float]:
    """Expected origin counts per cell under the random sampler's law."""
    per_image: dict[str, int] = {}
    for p in shortcut_patches:
        per_image[p.image_id] = per_image.get(p.image_id, 0) + 1
    ids = np.asarray(table.image_ids)
    non_target = ~np.isin(table.class_ids, sorted(palette.target_class_ids))
    banded = in_band(table.logits, band) & non_target
    expected: dict[tuple[int, int], float] = {}
    for image_id, k in per_image.items():
        candidates = np.nonzero(banded & (ids == image_id))[0]
        m = candidates.size
        if m == 0:
            continue
        inclusion = min(k, m) / m
        for i in candidates:
            cell = (int(table.rows[i]), int(table.cols[i]))
            expected[cell] = expected.get(cell, 0.0) + inclusion
    return expected


def build_image_sets(
    shortcut_patches: list[PatchRef],
    manifest: DatasetManifest,
    network_labels: dict[str, dict[str, int]],
) -> dict[str, list[str]]:
    """Per-network audit image sets.

    For each network N: images that contain at least one shortcut patch,
    carry ground-truth label negative, and are predicted negative by N.
    """
    bearing = sorted({p.image_id for p in shortcut_patches})
    gt = {e.image_id: e.label for e in manifest.entries}
    sets: dict[str, list[str]] = {}
    for network, labels in network_labels.items():
        sets[network] = [
            iid for iid in bearing
            if gt[iid] == NEGATIVE and labels.get(iid) == 0
        ]
    return sets


@dataclass
class ShortcutSets:
    """Everything the audit needs: threshold, band, patch sets, image sets."""

    threshold: float
    band: tuple[float, float]
    quantile_q: float
    band_q: tuple[float, float]
    shortcut_patches: list[PatchRef]
    random_patches: list[PatchRef]
    eligible_images: dict[str, list[str]]       # network -> image ids
    skipped_random_images: list[str] = field(default_factory=list)
    sampling_seed: int = 0

    def patches_for(self, tag: str) -> list[PatchRef]:
        if tag in (TAG_SHORTCUT, TAG_SHUFFLED, TAG_MEAN):
            if tag == TAG_SHORTCUT:
                return self.shortcut_patches
            return [replace(p, set_tag=tag) for p in self.shortcut_patches]
        if tag == TAG_RANDOM:
            return self.random_patches
        raise ValidationError(f"unknown patch set tag {tag!r}")

    def to_dict(self) -> dict:
        union = set()
        inter: set | None = None
        for ids in self.eligible_images.values():
            union |= set(ids)
            inter = set(ids) if inter is None else inter & set(ids)
        return {
            "threshold": self.threshold,
            "band": list(self.band),
            "quantile_q": self.quantile_q,
            "band_q": list(self.band_q),
            "sampling_seed": self.sampling_seed,
            "shortcut_patches": [p.to_dict() for p in self.shortcut_patches],
            "random_patches": [p.to_dict() for p in self.random_patches],
            "eligible_images": {k: list(v) for k, v in sorted(self.eligible_images.items())},
            "eligible_union_size": len(union),
            "eligible_intersection_size": len(inter or set()),
            "skipped_random_images": list(self.skipped_random_images),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShortcutSets":
        return cls(
            threshold=float(d["threshold"]),
            band=tuple(float(v) for v in d["band"]),
            quantile_q=float(d["quantile_q"]),
            band_q=tuple(float(v) for v in d["band_q"]),
            shortcut_patches=[PatchRef.from_dict(p) for p in d["shortcut_patches"]],
            random_patches=[PatchRef.from_dict(p) for p in d["random_patches"]],
            eligible_images={k: list(v) for k, v in d["eligible_images"].items()},
            skipped_random_images=list(d.get("skipped_random_images", [])),
            sampling_seed=int(d.get("sampling_seed", 0)),
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path) -> "ShortcutSets":
        with open(path) as f:
            return cls.from_dict(json.load(f))
