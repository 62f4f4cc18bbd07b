"""Dataset ingestion: IDX (Fashion-MNIST) files, subsets, synthetic blobs.

IDX files are big-endian with magic 0x00000803 for images and 0x00000801
for labels; gzip-compressed inputs are detected by their 0x1F8B prefix.
Pixels are u8 scaled to [0, 1]; no mean/std standardization is applied so
the perturbation budget keeps its plain pixel-space meaning.
"""

from __future__ import annotations

import gzip
import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterator, Tuple

import numpy as np

from .seeds import rng_for

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DatasetFormatError(ValueError):
    """Raised for bad magic numbers, truncation, or count mismatches."""


@dataclass
class Dataset:
    images: np.ndarray            # [N,1,28,28] float64 in [0,1]
    labels: np.ndarray            # [N] int64 in {0..9}
    split: str = "train"
    digest: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] == 0:
            raise ValueError(f"images must be [N,1,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("label count does not match image count")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise ValueError("pixel values outside [0,1]")
        if self.labels.min() < 0 or self.labels.max() >= 10:
            raise ValueError("labels outside {0..9}")
        if not self.digest:
            h = hashlib.sha256()
            h.update(self.images.tobytes())
            h.update(self.labels.astype(np.int64).tobytes())
            self.digest = h.hexdigest()

    def __len__(self) -> int:
        return self.images.shape[0]


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """Parse an IDX image/label file pair into a Dataset."""
    img_raw = _read_bytes(images_path)
    lbl_raw = _read_bytes(labels_path)
    if len(img_raw) < 16 or len(lbl_raw) < 8:
        raise DatasetFormatError("IDX header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", img_raw[:16])
    if magic != IMAGE_MAGIC:
        raise DatasetFormatError(f"bad image magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    lmagic, ln = struct.unpack(">II", lbl_raw[:8])
    if lmagic != LABEL_MAGIC:
        raise DatasetFormatError(f"bad label magic 0x{lmagic:08x}, expected 0x{LABEL_MAGIC:08x}")
    if n != ln:
        raise DatasetFormatError(f"image count {n} != label count {ln}")
    if len(img_raw) != 16 + n * rows * cols:
        raise DatasetFormatError("image data truncated")
    if len(lbl_raw) != 8 + n:
        raise DatasetFormatError("label data truncated")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    images = pixels.reshape(n, 1, rows, cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    digest = hashlib.sha256(img_raw + lbl_raw).hexdigest()
    return Dataset(images, labels, split=split, digest=digest)


def subset(dataset: Dataset, n: int, seed: int) -> Dataset:
    """n distinct indices drawn by a seeded shuffle of the full index set."""
    total = len(dataset)
    if not 0 < n <= total:
        raise ValueError(f"subset size {n} out of range (1..{total})")
    idx = rng_for(seed, "subset").permutation(total)[:n]
    return Dataset(dataset.images[idx].copy(), dataset.labels[idx].copy(),
                   split=dataset.split)


def make_synthetic(n: int, seed: int) -> Dataset:
    """Two-Gaussian-blob 28x28 images with linearly separable labels.

    Class 0 puts a bright blob in the upper-left region, class 1 in the
    lower-right; pixel noise is small relative to the blob contrast.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = rng_for(seed, "synthetic")
    yy, xx = np.mgrid[0:28, 0:28]
    blob0 = np.exp(-(((yy - 9) ** 2 + (xx - 9) ** 2) / (2 * 3.0 ** 2)))
    blob1 = np.exp(-(((yy - 18) ** 2 + (xx - 18) ** 2) / (2 * 3.0 ** 2)))
    labels = rng.integers(0, 2, size=n)
    images = np.empty((n, 1, 28, 28))
    for i, y in enumerate(labels):
        base = blob0 if y == 0 else blob1
        jitter = rng.normal(0, 0.05, (28, 28))
        images[i, 0] = np.clip(0.7 * base + jitter + 0.1, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), split="synthetic")


class BatchIterator:
    """Seeded mini-batch iteration; order is a pure function of (seed, epoch)."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int):
        if batch_size <= 0:
            raise ValueError("batch size must be positive")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0

    def batches(self, epoch: int | None = None) -> Iterator[Tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Yield (images, labels, dataset_indices) covering every index once."""
        if epoch is None:
            epoch = self.epoch
            self.epoch += 1
        order = rng_for(self.seed, "shuffle", epoch).permutation(len(self.dataset))
        for i in range(0, len(order), self.batch_size):
            idx = order[i:i + self.batch_size]
            yield self.dataset.images[idx], self.dataset.labels[idx], idx
