"""Dataset ingestion, splitting and batch sampling.

IDX is the MNIST distribution format: big-endian magic, dimension sizes,
then raw uint8 payload. Pixels are normalized to [0, 1] and images are
flattened to feature vectors (the models here are MLPs). Gzip-compressed
files are recognized by their .gz extension.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError, StratificationError

IMAGE_MAGIC = 0x00000803  # 2051
LABEL_MAGIC = 0x00000801  # 2049


@dataclass
class Dataset:
    samples: np.ndarray              # n x d float32 in [0, 1]
    labels: np.ndarray               # n int64 in [0, C)
    num_classes: int
    class_indices: list = field(repr=False, default=None)
    image_shape: tuple | None = None  # (rows, cols) when loaded from IDX

    def __post_init__(self):
        if self.class_indices is None:
            self.class_indices = [np.flatnonzero(self.labels == c)
                                  for c in range(self.num_classes)]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def num_features(self) -> int:
        return self.samples.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.samples[indices].copy(), self.labels[indices].copy(),
                       self.num_classes, image_shape=self.image_shape)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(b"dloss-dataset-v1")
        h.update(struct.pack("<qqq", *self.samples.shape, self.num_classes))
        h.update(np.ascontiguousarray(self.samples, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


@dataclass
class LabeledBatch:
    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


@dataclass
class SamplerConfig:
    batch_size: int
    seed: int
    strategy: str = "uniform"  # or "class-balanced"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch size must be >= 2, got {self.batch_size}")
        if self.strategy not in ("uniform", "class-balanced"):
            raise ConfigError(f"unknown sampler strategy {self.strategy!r}")


def _read_file(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(raw: bytes, expected_magic: int, ndim: int, path) -> np.ndarray:
    header = 4 * (1 + ndim)
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic = struct.unpack(">i", raw[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(f"{path}: magic {magic}, expected {expected_magic}")
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    expected = int(np.prod(dims))
    payload = raw[header:]
    if len(payload) != expected:
        raise DataFormatError(
            f"{path}: payload is {len(payload)} bytes, dims {dims} need {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Decode an IDX image/label file pair into a flattened float dataset."""
    images = _parse_idx(_read_file(images_path), IMAGE_MAGIC, 3, images_path)
    labels = _parse_idx(_read_file(labels_path), LABEL_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    n, rows, cols = images.shape
    samples = (images.reshape(n, rows * cols).astype(np.float32) / np.float32(255.0))
    labels = labels.astype(np.int64)
    return Dataset(samples, labels, int(labels.max()) + 1, image_shape=(rows, cols))


def encode_idx(ds: Dataset) -> tuple[bytes, bytes]:
    """Re-encode a dataset as IDX bytes (inverse of load_idx)."""
    if ds.image_shape is None:
        raise DataFormatError("dataset carries no image shape; cannot encode as IDX")
    rows, cols = ds.image_shape
    pixels = np.round(ds.samples * 255.0).astype(np.uint8)
    images = struct.pack(">iiii", IMAGE_MAGIC, ds.num_samples, rows, cols) + pixels.tobytes()
    labels = struct.pack(">ii", LABEL_MAGIC, ds.num_samples) + ds.labels.astype(np.uint8).tobytes()
    return images, labels


def split_train_val(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split: each class contributes round(n_c * fraction) to val."""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 2])))
    val_parts, train_parts = [], []
    for c in range(ds.num_classes):
        members = ds.class_indices[c]
        n_val = int(np.floor(members.size * val_fraction + 0.5))
        if members.size == 0 or n_val == 0 or n_val == members.size:
            raise StratificationError(
                f"class {c} with {members.size} sample(s) cannot be stratified "
                f"at fraction {val_fraction}")
        shuffled = rng.permutation(members)
        val_parts.append(np.sort(shuffled[:n_val]))
        train_parts.append(np.sort(shuffled[n_val:]))
    train_idx = np.sort(np.concatenate(train_parts))
    val_idx = np.sort(np.concatenate(val_parts))
    return ds.subset(train_idx), ds.subset(val_idx)


def stratified_subset(ds: Dataset, size: int, seed: int) -> Dataset:
    """Class-proportional subset of the dataset, used for desk-scale runs."""
    if not 0 < size <= ds.num_samples:
        raise ConfigError(f"subset size {size} outside (0, {ds.num_samples}]")
    if size == ds.num_samples:
        return ds
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 3])))
    fraction = size / ds.num_samples
    parts = []
    for c in range(ds.num_classes):
        members = ds.class_indices[c]
        quota = int(np.floor(members.size * fraction + 0.5))
        quota = min(max(quota, 1), members.size)
        parts.append(np.sort(rng.permutation(members)[:quota]))
    return ds.subset(np.sort(np.concatenate(parts)))


def batches_per_epoch(num_samples: int, batch_size: int) -> int:
    return -(-num_samples // batch_size)


def sample_batch(ds: Dataset, cfg: SamplerConfig, step: int) -> LabeledBatch:
    """Deterministic batch for a global step index.

    Uniform strategy: consecutive slices of a fresh per-epoch shuffle, so
    every epoch visits each sample exactly once. Class-balanced strategy:
    ceil(B/C) draws per class (with replacement only when a class is
    smaller than its quota), truncated to B.
    """
    n = ds.num_samples
    if cfg.batch_size > n:
        raise ConfigError(f"batch size {cfg.batch_size} exceeds dataset size {n}")
    if cfg.strategy == "uniform":
        per_epoch = batches_per_epoch(n, cfg.batch_size)
        epoch, offset = divmod(int(step), per_epoch)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 4, epoch])))
        order = rng.permutation(n)
        picked = order[offset * cfg.batch_size:(offset + 1) * cfg.batch_size]
    else:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 5, int(step)])))
        quota = -(-cfg.batch_size // ds.num_classes)
        parts = []
        for c in range(ds.num_classes):
            members = ds.class_indices[c]
            replace = members.size < quota
            parts.append(rng.choice(members, size=quota, replace=replace))
        picked = np.concatenate(parts)[:cfg.batch_size]
    return LabeledBatch(inputs=ds.samples[picked], labels=ds.labels[picked],
                        indices=picked)


def synthetic_blobs(classes: int, dim: int, center_spread: float, within_std: float,
                    per_class: int, seed: int) -> Dataset:
    """Gaussian class blobs with uniformly placed centers, rescaled to [0, 1]."""
    if classes < 2 or per_class < 2:
        raise ConfigError("need at least 2 classes and 2 samples per class")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 6])))
    centers = rng.uniform(-center_spread, center_spread, (classes, dim))
    samples = np.concatenate([
        centers[c] + rng.normal(0.0, within_std, (per_class, dim))
        for c in range(classes)
    ])
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    lo, hi = samples.min(), samples.max()
    samples = (samples - lo) / max(hi - lo, 1e-12)
    return Dataset(samples.astype(np.float32), labels, classes)
