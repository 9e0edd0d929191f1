"""Dataset loading (CIFAR-10 binary, MNIST IDX), synthetic blobs and batching."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import Rng

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """A dataset file is missing, truncated or malformed."""


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray   # (count, h, w, c) float32 in [0, 1]
    labels: np.ndarray   # (count,) int64
    classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be (count, h, w, c), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValueError(f"{len(self.labels)} labels for {len(self.images)} images")
        if self.classes < 1:
            raise ValueError("classes must be positive")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices], self.classes)

    def head(self, count: int | None) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return self.subset(np.arange(count))

    def split(self, test_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Shuffled (train, test) split."""
        if not 0 < test_fraction < 1:
            raise ValueError("test_fraction must lie in (0, 1)")
        order = Rng(seed).derive("split").generator.permutation(len(self))
        n_test = int(round(len(self) * test_fraction))
        return self.subset(np.sort(order[n_test:])), self.subset(np.sort(order[:n_test]))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except FileNotFoundError:
        raise DataFormatError(f"{path}: file not found") from None


def read_cifar10_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """Raw (uint8 HWC images, labels) from one CIFAR-10 binary batch file."""
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
        raise DataFormatError(f"{path}: truncated record at byte offset {offset} "
                              f"(file length {len(raw)} is not a multiple of {CIFAR_RECORD})")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        r = int(bad[0])
        raise DataFormatError(f"{path}: label byte {labels[r]} > 9 in record {r} "
                              f"at byte offset {r * CIFAR_RECORD}")
    # planar R, G, B -> interleaved HWC
    pixels = records[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(pixels), labels


def write_cifar10_batch(path, pixels: np.ndarray, labels) -> None:
    """Write uint8 HWC images and labels in CIFAR-10 binary layout."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if pixels.shape[1:] != (32, 32, 3) or len(pixels) != len(labels):
        raise ValueError(f"expected (n, 32, 32, 3) pixels and n labels, got {pixels.shape}")
    planar = pixels.transpose(0, 3, 1, 2).reshape(len(pixels), -1)
    Path(path).write_bytes(np.concatenate([labels[:, None], planar], axis=1).tobytes())


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.rint(np.asarray(images) * 255).astype(np.uint8)


def _load_cifar_files(paths) -> Dataset:
    parts = [read_cifar10_batch(p) for p in paths]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([lab for _, lab in parts])
    return Dataset(to_unit(pixels), labels, 10)


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    """(train, test) from the five training batches and the test batch."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataFormatError(f"{directory}: not a directory")
    train = _load_cifar_files([directory / f for f in CIFAR_TRAIN_FILES])
    test = _load_cifar_files([directory / CIFAR_TEST_FILE])
    return train, test


def _idx_header(raw: bytes, path, magic: int, ndim: int) -> tuple[int, ...]:
    if len(raw) >= 4:
        (found,) = struct.unpack(">I", raw[:4])
        if found != magic:
            raise DataFormatError(f"{path}: magic number 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < 4 + 4 * ndim:
        raise DataFormatError(f"{path}: truncated IDX header ({len(raw)} bytes)")
    return struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    count, rows, cols = _idx_header(raw, path, IDX_IMAGES_MAGIC, 3)
    body = raw[16:]
    expected = count * rows * cols
    if len(body) < expected:
        raise DataFormatError(f"{path}: header promises {count} images ({expected} bytes), "
                              f"body has {len(body)} bytes")
    if len(body) > expected:
        raise DataFormatError(f"{path}: {len(body) - expected} trailing bytes after {count} images")
    return np.frombuffer(body, dtype=np.uint8).reshape(count, rows, cols, 1).copy()


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    (count,) = _idx_header(raw, path, IDX_LABELS_MAGIC, 1)
    body = raw[8:]
    if len(body) != count:
        raise DataFormatError(f"{path}: header promises {count} labels, body has {len(body)} bytes")
    return np.frombuffer(body, dtype=np.uint8).astype(np.int64)


def load_mnist_idx(images_path, labels_path, classes: int = 10) -> Dataset:
    pixels = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(pixels) != len(labels):
        raise DataFormatError(f"{images_path} holds {len(pixels)} images but "
                              f"{labels_path} holds {len(labels)} labels")
    if len(labels) and labels.max() >= classes:
        raise DataFormatError(f"{labels_path}: label {labels.max()} >= {classes}")
    return Dataset(to_unit(pixels), labels, classes)


def write_mnist_idx(images_path, labels_path, pixels: np.ndarray, labels) -> None:
    """Write uint8 (count, rows, cols[, 1]) images and labels as an IDX pair."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim == 4:
        pixels = pixels[..., 0]
    labels = np.asarray(labels, dtype=np.uint8)
    count, rows, cols = pixels.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols)
                                  + pixels.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
                                  + labels.tobytes())


def synth_blobs(classes: int, per_class: int, dim, spread: float, seed: int) -> Dataset:
    """Gaussian clusters around random centers in [0.2, 0.8], clamped to [0, 1].

    ``dim`` is an int (samples shaped (1, 1, dim)) or an (h, w, c) tuple.
    Samples are grouped by class.
    """
    if classes < 2:
        raise ValueError("synth_blobs needs at least two classes")
    if per_class < 1:
        raise ValueError("per_class must be positive")
    if spread < 0:
        raise ValueError("spread must be non-negative")
    shape = (1, 1, int(dim)) if np.isscalar(dim) else tuple(int(d) for d in dim)
    root = Rng(seed).derive("synth")
    centers = root.derive("centers").generator.uniform(0.2, 0.8, size=(classes,) + shape)
    noise = root.derive("noise").generator.standard_normal((classes, per_class) + shape)
    images = np.clip(centers[:, None] + spread * noise, 0.0, 1.0)
    images = images.reshape((classes * per_class,) + shape).astype(np.float32)
    labels = np.repeat(np.arange(classes), per_class)
    return Dataset(images, labels, classes)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int
    epoch: int = 1

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")

    def order(self, count: int) -> np.ndarray:
        return Rng(self.seed).derive("shuffle").derive(self.epoch).generator.permutation(count)


def batches(ds: Dataset, plan: BatchPlan) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled mini-batches covering every sample once; last batch may be short."""
    order = plan.order(len(ds))
    for start in range(0, len(order), plan.batch_size):
        idx = order[start:start + plan.batch_size]
        yield ds.images[idx], ds.labels[idx]


def mnist_paths(directory, split: str) -> tuple[str, str]:
    """Standard IDX file names inside ``directory`` for split 'train' or 't10k'."""
    prefix = "train" if split == "train" else "t10k"
    return (os.path.join(directory, f"{prefix}-images-idx3-ubyte"),
            os.path.join(directory, f"{prefix}-labels-idx1-ubyte"))
