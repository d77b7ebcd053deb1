"""Grid-based patch insertion testing against label-only predictors.

Every audited patch is copied back into its own source image at every grid
position (one of which reproduces the source image bit-exactly), the
predictor is queried on each variant, and a success is a flip from a
correct negative prediction to positive.  Shuffle and mean ablations
destroy the patch content while keeping its color mass, separating the
semantic effect from insertion-edge artifacts.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as scipy_stats

from .blackbox import OracleAdapter
from .datakit import NEGATIVE, POSITIVE, NormalizationStats, normalize_batch
from .errors import ValidationError
from .extraction import TAG_MEAN, TAG_SHUFFLED, PatchRef
from .grid import GridGeometry
from .rngkit import substream

log = logging.getLogger(__name__)

REPORT_FORMAT = "patchaudit-report/1"


def insertion_grid(geometry: GridGeometry) -> list[tuple[int, int]]:
    """All insertion positions, row-major; one per heatmap cell."""
    return geometry.positions()


def extract_patch(image: np.ndarray, bbox: tuple[int, int, int, int]) -> np.ndarray:
    top, left, h, w = bbox
    if top < 0 or left < 0 or top + h > image.shape[0] or left + w > image.shape[1]:
        raise ValidationError(f"bbox {bbox} outside image {image.shape[:2]}")
    return image[top:top + h, left:left + w].copy()


def insert_patch(
    image: np.ndarray,
    patch: np.ndarray,
    position: tuple[int, int],
    geometry: GridGeometry,
) -> np.ndarray:
    """Copy of `image` with the r x r window at `position` overwritten."""
    top, left, h, w = geometry.cell_window(*position)
    if patch.shape[:2] != (h, w):
        raise ValidationError(f"patch shape {patch.shape[:2]} does not fit window {(h, w)}")
    out = image.copy()
    out[top:top + h, left:left + w] = patch
    return out


def ablate_shuffle(patch: np.ndarray, rng_seed: int) -> np.ndarray:
    """Seeded uniform permutation of pixel positions; channels move together."""
    rng = np.random.default_rng(int(rng_seed))
    h, w = patch.shape[:2]
    flat = patch.reshape(h * w, -1)
    return flat[rng.permutation(h * w)].reshape(patch.shape)


def ablate_mean(patch: np.ndarray) -> np.ndarray:
    """Every pixel replaced by the per-channel mean (float64 accumulation)."""
    mean = patch.astype(np.float64).mean(axis=(0, 1))
    out = np.empty_like(patch, dtype=np.float64)
    out[:] = mean
    return out


@dataclass(frozen=True)
class InsertionRecord:
    image_id: str
    patch_key: tuple[str, int, int]
    set_tag: str
    position: tuple[int, int]
    pre_label: int
    post_label: int
    success: bool

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "patch_key": list(self.patch_key),
            "set_tag": self.set_tag,
            "position": list(self.position),
            "pre_label": self.pre_label,
            "post_label": self.post_label,
            "success": self.success,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InsertionRecord":
        key = d["patch_key"]
        return cls(
            image_id=str(d["image_id"]),
            patch_key=(str(key[0]), int(key[1]), int(key[2])),
            set_tag=str(d["set_tag"]),
            position=(int(d["position"][0]), int(d["position"][1])),
            pre_label=int(d["pre_label"]),
            post_label=int(d["post_label"]),
            success=bool(d["success"]),
        )


def _prep_for_query(images: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return normalize_batch(images.astype(np.float32), stats)


def predict_clean(
    adapter: OracleAdapter,
    images_by_id: dict[str, np.ndarray],
    stats: NormalizationStats,
    batch_size: int = 64,
) -> dict[str, int]:
    """One label per image, deterministic order, via the adapter surface."""
    ids = sorted(images_by_id)
    labels: dict[str, int] = {}
    for i in range(0, len(ids), batch_size):
        chunk = ids[i:i + batch_size]
        batch = np.stack([images_by_id[iid] for iid in chunk])
        out = adapter.query_labels(_prep_for_query(batch, stats))
        for iid, lab in zip(chunk, out):
            labels[iid] = int(lab)
    return labels


def _prepare_patch_pixels(
    patch: PatchRef,
    image: np.ndarray,
    ablation_seed: int,
) -> np.ndarray:
    pixels = extract_patch(image, patch.bbox)
    if patch.set_tag == TAG_SHUFFLED:
        rng_seed = substream(ablation_seed, "shuffle-ablation", *patch.key()).integers(2**62)
        return ablate_shuffle(pixels, int(rng_seed))
    if patch.set_tag == TAG_MEAN:
        return ablate_mean(pixels)
    return pixels


def run_audit(
    adapter: OracleAdapter,
    patches: list[PatchRef],
    images_by_id: dict[str, np.ndarray],
    pre_labels: dict[str, int],
    geometry: GridGeometry,
    stats: NormalizationStats,
    ablation_seed: int = 0,
    checkpoint_path: str | Path | None = None,
) -> list[InsertionRecord]:
    """Insert every patch at every grid position of its own image and query.

    Records are emitted in (image id, patch key, position row-major) order.
    With a checkpoint path, completed (image, patch) groups are appended as
    JSONL and skipped on resume.
    """
    order = sorted(patches, key=lambda p: (p.image_id, p.key(), p.set_tag))
    positions = insertion_grid(geometry)

    done: dict[tuple, list[InsertionRecord]] = {}
    ckpt = Path(checkpoint_path) if checkpoint_path else None
    if ckpt and ckpt.exists():
        with open(ckpt) as f:
            for line in f:
                blob = json.loads(line)
                recs = [InsertionRecord.from_dict(r) for r in blob["records"]]
                done[(blob["image_id"], tuple(blob["patch_key"]), blob["set_tag"])] = recs
        if done:
            log.info("resuming audit: %d (image, patch) groups already complete", len(done))

    records: list[InsertionRecord] = []
    for patch in order:
        group_key = (patch.image_id, patch.key(), patch.set_tag)
        if group_key in done:
            records.extend(done[group_key])
            continue
        image = images_by_id[patch.image_id]
        if patch.image_id not in pre_labels:
            raise ValidationError(f"no clean prediction available for image {patch.image_id}")
        pre = int(pre_labels[patch.image_id])
        pixels = _prepare_patch_pixels(patch, image, ablation_seed)
        variants = np.stack([insert_patch(image, pixels, pos, geometry) for pos in positions])
        out = adapter.query_labels(_prep_for_query(variants, stats))
        group = [
            InsertionRecord(
                image_id=patch.image_id,
                patch_key=patch.key(),
                set_tag=patch.set_tag,
                position=pos,
                pre_label=pre,
                post_label=int(lab),
                success=bool(pre == 0 and int(lab) == 1),
            )
            for pos, lab in zip(positions, out)
        ]
        records.extend(group)
        if ckpt:
            with open(ckpt, "a") as f:
                f.write(json.dumps({
                    "image_id": patch.image_id,
                    "patch_key": list(patch.key()),
                    "set_tag": patch.set_tag,
                    "records": [r.to_dict() for r in group],
                }, sort_keys=True) + "\n")
    return records


@dataclass
class SuccessStats:
    mean: float | None
    median: float | None
    n_images: int
    n_patches: int
    per_image: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "median": self.median,
            "n_images": self.n_images,
            "n_patches": self.n_patches,
            "per_image": dict(sorted(self.per_image.items())),
        }


def success_stats(records: list[InsertionRecord], eligible_images: list[str]) -> SuccessStats:
    """Successes per (image, patch), averaged within image, then across images.

    Only images in the eligible set contribute; an empty set yields absent
    statistics rather than zeros.
    """
    eligible = set(eligible_images)
    per_patch: dict[tuple, int] = {}
    for r in records:
        if r.image_id not in eligible:
            continue
        per_patch.setdefault((r.image_id, r.patch_key), 0)
        if r.success:
            per_patch[(r.image_id, r.patch_key)] += 1
    by_image: dict[str, list[int]] = {}
    for (iid, _), count in per_patch.items():
        by_image.setdefault(iid, []).append(count)
    if not by_image:
        return SuccessStats(mean=None, median=None, n_images=0, n_patches=0)
    per_image = {iid: float(np.mean(counts)) for iid, counts in by_image.items()}
    values = np.asarray(sorted(per_image.values()), dtype=np.float64)
    return SuccessStats(
        mean=float(values.mean()),
        median=float(np.median(values)),
        n_images=len(per_image),
        n_patches=len(per_patch),
        per_image=per_image,
    )


_LABEL_INDEX = {NEGATIVE: 0, POSITIVE: 1}


def confusion_matrices(
    clean_labels: dict[str, int],
    gt_labels: dict[str, str],
    records: list[InsertionRecord],
) -> dict:
    """Row-normalized 2x2 matrices before and after insertion.

    Rows are actual {negative, positive}, columns predicted; the augmented
    matrix weights each of the grid variants once.  A row with no images is
    emitted as zeros and flagged.
    """
    clean_counts = np.zeros((2, 2), dtype=np.int64)
    for iid, pred in clean_labels.items():
        clean_counts[_LABEL_INDEX[gt_labels[iid]], int(pred)] += 1
    aug_counts = np.zeros((2, 2), dtype=np.int64)
    for r in records:
        aug_counts[_LABEL_INDEX[gt_labels[r.image_id]], r.post_label] += 1

    def normalize_rows(counts):
        out = np.zeros((2, 2), dtype=np.float64)
        flags = []
        for i in range(2):
            total = counts[i].sum()
            if total > 0:
                out[i] = counts[i] / total
            else:
                flags.append(["negative", "positive"][i])
        return out, flags

    clean_norm, clean_flags = normalize_rows(clean_counts)
    aug_norm, aug_flags = normalize_rows(aug_counts)
    return {
        "clean": clean_norm.tolist(),
        "augmented": aug_norm.tolist(),
        "clean_counts": clean_counts.tolist(),
        "augmented_counts": aug_counts.tolist(),
        "empty_rows_clean": clean_flags,
        "empty_rows_augmented": aug_flags,
    }


def position_heatmaps(
    records: list[InsertionRecord],
    patches: list[PatchRef],
    geometry: GridGeometry,
) -> tuple[np.ndarray, np.ndarray]:
    """(origin counts, success-position counts) on the grid."""
    gh, gw = geometry.shape
    origin = np.zeros((gh, gw), dtype=np.int64)
    for p in patches:
        origin[p.row, p.col] += 1
    success = np.zeros((gh, gw), dtype=np.int64)
    for r in records:
        if r.success:
            success[r.position[0], r.position[1]] += 1
    return origin, success


def chi_square_uniformity(
    observed: dict[tuple[int, int], int],
    expected: dict[tuple[int, int], float],
    min_expected: float = 5.0,
) -> dict:
    """Chi-square of observed origin counts against expected cell weights.

    Expected weights are rescaled to the observed total; cells with small
    expectation are pooled into one bin to keep the test valid.
    """
    cells = sorted(expected)
    exp = np.asarray([expected[c] for c in cells], dtype=np.float64)
    if exp.sum() <= 0:
        raise ValidationError("expected counts sum to zero")
    obs = np.asarray([observed.get(c, 0) for c in cells], dtype=np.float64)
    stray = sum(v for c, v in observed.items() if c not in expected)
    if stray:
        raise ValidationError(f"{stray} observed draws fall on cells with zero expectation")
    exp = exp * (obs.sum() / exp.sum())

    big = exp >= min_expected
    obs_bins = obs[big].tolist()
    exp_bins = exp[big].tolist()
    if (~big).any():
        obs_bins.append(float(obs[~big].sum()))
        exp_bins.append(float(exp[~big].sum()))
    if len(obs_bins) < 2:
        return {"chi2": 0.0, "dof": 0, "p_value": 1.0, "n_bins": len(obs_bins)}
    chi2, p = scipy_stats.chisquare(obs_bins, exp_bins)
    return {"chi2": float(chi2), "dof": len(obs_bins) - 1, "p_value": float(p),
            "n_bins": len(obs_bins)}


def correlate_enrichment_test(
    shortcut_class_ids: list[int],
    base_class_ids: np.ndarray,
    correlate_class_id: int,
) -> dict:
    """One-sided binomial test: correlate fraction in shortcut patches vs base rate."""
    n = len(shortcut_class_ids)
    if n == 0:
        return {"p_value": 1.0, "n": 0, "hits": 0, "base_rate": 0.0, "fraction": 0.0}
    hits = int(sum(1 for c in shortcut_class_ids if c == correlate_class_id))
    base = np.asarray(base_class_ids)
    base_rate = float((base == correlate_class_id).mean())
    result = scipy_stats.binomtest(hits, n, min(max(base_rate, 1e-12), 1 - 1e-12),
                                   alternative="greater")
    return {
        "p_value": float(result.pvalue),
        "n": n,
        "hits": hits,
        "base_rate": base_rate,
        "fraction": hits / n,
    }
