"""Manifests, COVIDx split configurations, image ingestion and synthetic data."""

from .batches import BatchStream, ImageDataset, LabeledBatch, balanced_order, load_split, prefetch
from .images import AugmentConfig, ImageRecord, augment, bilinear_resize, preprocess
from .manifest import (
    CLASS_NAMES,
    COVID19,
    DATA_ROOT_ENV,
    LABEL_STRINGS,
    NORMAL,
    PNEUMONIA,
    Manifest,
    ManifestEntry,
    SplitConfig,
    count_mismatches,
    derive_split,
    format_manifest,
    load_manifest,
    parse_label,
    parse_manifest,
    resolve_root,
    validate_counts,
    write_manifest,
)
from .synthetic import generate_synthetic, render_shape, train_count
