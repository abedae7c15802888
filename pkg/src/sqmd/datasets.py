"""Dataset loading: IDX image pairs, header CSV, and synthetic generators.

All loaders return (features, integer labels) as float64/int64 arrays;
`load_dataset` dispatches on a DatasetDescriptor and applies the requested
normalization so the rest of the pipeline never sees raw files.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError

log = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

KINDS = ("idx_images", "csv_rows", "synthetic_gaussian", "synthetic_rings")
NORMALIZATIONS = ("none", "minmax", "zscore")


@dataclass
class DatasetDescriptor:
    """What to load or generate. Only the fields relevant to `kind` are used:
    file paths for idx/csv, generator parameters for the synthetic kinds."""

    kind: str
    normalization: str = "none"
    # idx_images
    images_path: str | None = None
    labels_path: str | None = None
    # csv_rows
    path: str | None = None
    label_column: str | None = None
    # synthetic generators
    class_count: int | None = None
    samples: int | None = None
    feature_dim: int = 2
    class_means: list | None = None
    cov_scale: float = 1.0
    priors: list | None = None
    spread: float = 2.0
    ring_noise: float = 0.1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.kind == "idx_images" and not (self.images_path and self.labels_path):
            raise ConfigError("idx_images needs images_path and labels_path")
        if self.kind == "csv_rows" and not (self.path and self.label_column):
            raise ConfigError("csv_rows needs path and label_column")
        if self.kind.startswith("synthetic"):
            if not self.class_count or self.class_count < 1:
                raise ConfigError("synthetic datasets need class_count >= 1")
            if not self.samples or self.samples < 1:
                raise ConfigError("synthetic datasets need samples >= 1")


def _read_idx_array(path: str, expected_magic: int, n_dims: int) -> np.ndarray:
    with open(path, "rb") as f:
        offset = 0

        def take(n: int) -> bytes:
            nonlocal offset
            chunk = f.read(n)
            if len(chunk) != n:
                raise ParseError(f"{path}: truncated file at byte {offset + len(chunk)}")
            offset += n
            return chunk

        magic = struct.unpack(">I", take(4))[0]
        if magic != expected_magic:
            raise ParseError(f"{path}: bad magic 0x{magic:08x} at byte 0")
        dims = [struct.unpack(">I", take(4))[0] for _ in range(n_dims)]
        count = 1
        for d in dims:
            count *= d
        data = take(count)
    arr = np.frombuffer(data, dtype=np.uint8) if count else np.zeros(0, dtype=np.uint8)
    return arr.reshape(dims)


def load_idx(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a big-endian IDX image/label pair.

    Returns features flattened to one row per image and scaled to [0, 1],
    plus the integer label vector. Item counts must agree between files.
    """
    images = _read_idx_array(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx_array(labels_path, IDX_LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"item count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    row_width = int(np.prod(images.shape[1:]))
    features = images.reshape(images.shape[0], row_width).astype(np.float64) / 255.0
    return features, labels.astype(np.int64)


def load_csv(path: str, label_column: str) -> tuple[np.ndarray, np.ndarray]:
    """Read a rectangular numeric CSV with a header row.

    Every non-label column becomes a feature; the label column must hold
    integer class values. Ragged rows and non-numeric cells fail with the
    offending line number.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, expected a header row") from None
        if label_column not in header:
            raise ConfigError(f"label column {label_column!r} not found in header {header}")
        label_idx = header.index(label_column)
        features: list[list[float]] = []
        labels: list[int] = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
                )
            values = []
            for col, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: line {lineno}: non-numeric value {cell!r}"
                    ) from None
                if col == label_idx:
                    if v != int(v):
                        raise ParseError(f"{path}: line {lineno}: label {cell!r} is not an integer")
                    labels.append(int(v))
                else:
                    values.append(v)
            features.append(values)
    n_features = len(header) - 1
    x = np.asarray(features, dtype=np.float64).reshape(len(features), n_features)
    return x, np.asarray(labels, dtype=np.int64)


def _class_counts(priors: np.ndarray, total: int) -> np.ndarray:
    # Largest-remainder apportionment: deterministic and exact.
    raw = priors * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _resolve_priors(desc: DatasetDescriptor) -> np.ndarray:
    c = desc.class_count
    if desc.priors is None:
        return np.full(c, 1.0 / c)
    priors = np.asarray(desc.priors, dtype=np.float64)
    if priors.shape != (c,) or priors.min() < 0.0 or not np.isclose(priors.sum(), 1.0):
        raise ConfigError("priors must be a length-class_count non-negative vector summing to 1")
    zero = np.flatnonzero(priors == 0.0)
    if zero.size:
        log.warning("classes %s have zero prior and will be absent", zero.tolist())
    if (priors > 0.0).sum() == 1:
        log.warning("priors produce a single-class dataset")
    return priors


def _gaussian_blobs(desc: DatasetDescriptor, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    c, d, m = desc.class_count, desc.feature_dim, desc.samples
    if desc.class_means is not None:
        means = np.asarray(desc.class_means, dtype=np.float64)
        if means.shape != (c, d):
            raise ConfigError(f"class_means must have shape ({c}, {d})")
    else:
        # Default layout: means evenly spaced on a circle in the first two dims.
        angles = 2.0 * np.pi * np.arange(c) / max(c, 1)
        means = np.zeros((c, d))
        means[:, 0] = desc.spread * np.cos(angles)
        if d > 1:
            means[:, 1] = desc.spread * np.sin(angles)
    if desc.cov_scale <= 0.0:
        raise ConfigError("degenerate covariance: cov_scale must be positive")
    counts = _class_counts(_resolve_priors(desc), m)
    xs, ys = [], []
    for cls in range(c):
        n = int(counts[cls])
        xs.append(means[cls] + np.sqrt(desc.cov_scale) * rng.standard_normal((n, d)))
        ys.append(np.full(n, cls, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(m)
    return x[perm], y[perm]


def _rings(desc: DatasetDescriptor, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if desc.feature_dim != 2:
        raise ConfigError("synthetic_rings is a 2-D generator (feature_dim must be 2)")
    if desc.ring_noise <= 0.0:
        raise ConfigError("degenerate covariance: ring_noise must be positive")
    c, m = desc.class_count, desc.samples
    counts = _class_counts(_resolve_priors(desc), m)
    xs, ys = [], []
    for cls in range(c):
        n = int(counts[cls])
        radius = desc.spread * (cls + 1) / c
        r = radius + desc.ring_noise * rng.standard_normal(n)
        theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
        xs.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
        ys.append(np.full(n, cls, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    perm = rng.permutation(m)
    return x[perm], y[perm]


def generate_synthetic(desc: DatasetDescriptor, seed) -> tuple[np.ndarray, np.ndarray]:
    """Seeded draws from the descriptor's class-conditional distributions.

    `seed` may be an int or a Generator; identical seeds reproduce the
    arrays exactly.
    """
    rng = np.random.default_rng(seed)
    if desc.kind == "synthetic_gaussian":
        return _gaussian_blobs(desc, rng)
    if desc.kind == "synthetic_rings":
        return _rings(desc, rng)
    raise ConfigError(f"{desc.kind!r} is not a synthetic dataset kind")


def normalize_features(x: np.ndarray, mode: str) -> np.ndarray:
    if mode == "none" or x.size == 0:
        return x
    if mode == "minmax":
        lo = x.min(axis=0)
        span = x.max(axis=0) - lo
        span = np.where(span < 1e-12, 1.0, span)
        return (x - lo) / span
    if mode == "zscore":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        std = np.where(std < 1e-12, 1.0, std)
        return (x - mean) / std
    raise ConfigError(f"unknown normalization {mode!r}")


def load_dataset(desc: DatasetDescriptor, seed=None) -> tuple[np.ndarray, np.ndarray, int]:
    """Load or generate the dataset and return (features, labels, classes)."""
    if desc.kind == "idx_images":
        x, y = load_idx(desc.images_path, desc.labels_path)
    elif desc.kind == "csv_rows":
        x, y = load_csv(desc.path, desc.label_column)
    else:
        x, y = generate_synthetic(desc, seed)
    x = normalize_features(x, desc.normalization)
    if not np.all(np.isfinite(x)):
        raise ConfigError("dataset features are not finite after normalization")
    if desc.class_count is not None:
        n_classes = int(desc.class_count)
    else:
        n_classes = int(y.max()) + 1 if y.size else 0
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ConfigError(f"labels must lie in [0, {n_classes})")
    return x, y, n_classes
