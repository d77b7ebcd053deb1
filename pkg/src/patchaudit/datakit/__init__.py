"""Synthetic dataset generation, on-disk loading, labeling, and splits."""

from .io import (
    image_to_uint8,
    iter_split_samples,
    load_dataset,
    load_image,
    load_mask,
    load_sample,
    load_split_arrays,
    load_stats,
    save_dataset,
    save_stats,
    uint8_to_image,
    write_manifest,
)
from .manifest import TEST, TRAIN, DatasetManifest, SampleEntry, split_dataset
from .normalize import (
    NormalizationStats,
    fit_normalization,
    normalize,
    normalize_batch,
    resize_image,
    resize_mask,
)
from .palette import (
    DISCARDED,
    NEGATIVE,
    POSITIVE,
    ClassPalette,
    LabelRule,
    binary_label,
    target_pixel_fraction,
)
from .scenegen import SceneSample, SceneSpec, generate_dataset, generate_scene, iter_dataset

__all__ = [
    "ClassPalette",
    "DatasetManifest",
    "DISCARDED",
    "LabelRule",
    "NEGATIVE",
    "NormalizationStats",
    "POSITIVE",
    "SampleEntry",
    "SceneSample",
    "SceneSpec",
    "TEST",
    "TRAIN",
    "binary_label",
    "fit_normalization",
    "generate_dataset",
    "generate_scene",
    "image_to_uint8",
    "iter_dataset",
    "iter_split_samples",
    "load_dataset",
    "load_image",
    "load_mask",
    "load_sample",
    "load_split_arrays",
    "load_stats",
    "normalize",
    "normalize_batch",
    "resize_image",
    "resize_mask",
    "save_dataset",
    "save_stats",
    "split_dataset",
    "target_pixel_fraction",
    "uint8_to_image",
    "write_manifest",
]
