"""Datasets and seeded mini-batch streams.

Synthetic tasks are generated in-process; CIFAR-10 (binary version) and IDX
files are parsed directly from disk.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

CIFAR_RECORD = 1 + 3 * 32 * 32
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    name: str = "dataset"

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x_train.shape[1:])

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.x_train.astype(dtype), self.y_train, self.x_test.astype(dtype),
                       self.y_test, self.n_classes, self.name)


class BatchStream:
    """Mini-batches of a fixed array pair, reshuffled every epoch.

    The permutation for epoch ``e`` depends only on ``(seed, e)``, so any
    consumer can replay the exact batch order. The trailing partial batch is
    dropped.
    """

    def __init__(self, x: np.ndarray, y: np.ndarray, batch_size: int, seed: int = 0):
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        if len(x) < batch_size:
            raise ValueError(f"dataset of {len(x)} samples is smaller than one batch ({batch_size})")
        self.x, self.y = x, y
        self.batch_size = batch_size
        self.seed = seed

    @property
    def batches_per_epoch(self) -> int:
        return len(self.x) // self.batch_size

    def epoch(self, e: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.random.default_rng([self.seed, e]).permutation(len(self.x))
        b = self.batch_size
        for i in range(self.batches_per_epoch):
            idx = order[i * b:(i + 1) * b]
            yield self.x[idx], self.y[idx]

    def epochs(self, n: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for e in range(n):
            yield from self.epoch(e)

    def cycle(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        e = 0
        while True:
            yield from self.epoch(e)
            e += 1


def synthetic_gaussians(classes: int = 4, size: int = 16, n: int = 2048, seed: int = 0,
                        channels: int = 3, noise: float = 1.0, n_test: int | None = None,
                        dtype=np.float32) -> Dataset:
    """Gaussian noise around class-specific oriented gratings.

    Class ``k`` is a sinusoidal grating with its own orientation, frequency
    and channel mix; every sample gets a random phase, so the class is not
    linearly readable from raw pixels and depth helps.
    """
    if classes < 2 or size < 2 or n < classes:
        raise DatasetError("synthetic-gaussians needs classes >= 2, size >= 2, n >= classes")
    rng = np.random.default_rng(seed)
    n_test = n // 2 if n_test is None else n_test
    angles = np.pi * (np.arange(classes) + rng.uniform(0, 0.5)) / classes
    freqs = rng.uniform(1.5, 3.0, size=classes) * 2 * np.pi / size
    mix = rng.normal(size=(classes, channels))
    mix /= np.linalg.norm(mix, axis=1, keepdims=True)
    uu, vv = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")

    def draw(m):
        y = rng.integers(0, classes, size=m)
        phase = rng.uniform(0, 2 * np.pi, size=m)
        proj = (np.cos(angles[y])[:, None, None] * uu + np.sin(angles[y])[:, None, None] * vv)
        wave = np.sin(freqs[y][:, None, None] * proj + phase[:, None, None])
        x = mix[y][:, :, None, None] * wave[:, None] * math.sqrt(channels)
        x = x + noise * rng.normal(size=x.shape)
        return x.astype(dtype), y.astype(np.int64)

    x_tr, y_tr = draw(n)
    x_te, y_te = draw(n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, classes, f"synthetic-gaussians-{classes}")


def synthetic_spirals(classes: int = 3, size: int = 16, n: int = 2048, seed: int = 0,
                      channels: int = 3, noise: float = 0.3, n_test: int | None = None,
                      dtype=np.float32) -> Dataset:
    """Interleaved 2-D spiral arms rendered as a Gaussian blob per image."""
    if classes < 2 or size < 4:
        raise DatasetError("synthetic-spirals needs classes >= 2 and size >= 4")
    rng = np.random.default_rng(seed)
    n_test = n // 2 if n_test is None else n_test
    grid = np.arange(size) + 0.5

    def draw(m):
        y = rng.integers(0, classes, size=m)
        r = rng.uniform(0.1, 1.0, size=m)
        theta = 2 * np.pi * y / classes + 3.0 * r + rng.normal(scale=0.15, size=m)
        px = (0.5 + 0.45 * r * np.cos(theta)) * size
        py = (0.5 + 0.45 * r * np.sin(theta)) * size
        blob = np.exp(-((grid[None, :, None] - px[:, None, None]) ** 2
                        + (grid[None, None, :] - py[:, None, None]) ** 2) / 2.0)
        x = np.repeat(blob[:, None], channels, axis=1) * 2.0
        x = x + noise * rng.normal(size=x.shape)
        return x.astype(dtype), y.astype(np.int64)

    x_tr, y_tr = draw(n)
    x_te, y_te = draw(n_test)
    return Dataset(x_tr, y_tr, x_te, y_te, classes, f"synthetic-spirals-{classes}")


def _open(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_cifar10_binary(path: "str | Path", subset_n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Parse a CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    n_full, rem = divmod(len(raw), CIFAR_RECORD)
    if rem:
        raise DatasetError(f"{path}: truncated record {n_full} at byte offset "
                           f"{n_full * CIFAR_RECORD} ({rem} of {CIFAR_RECORD} bytes present)")
    if n_full == 0:
        raise DatasetError(f"{path}: empty file")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n_full, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{path}: record {i} at byte offset {i * CIFAR_RECORD} has label "
                           f"{labels[i]} outside [0, 10)")
    images = records[:, 1:].reshape(n_full, 3, 32, 32)
    if subset_n is not None:
        images, labels = images[:subset_n], labels[:subset_n]
    return images.copy(), labels


_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: np.dtype(">i2"), 0x0C: np.dtype(">i4"),
               0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


def read_idx(path: "str | Path") -> np.ndarray:
    """Parse an IDX file (e.g. MNIST). Images use magic 0x803, labels 0x801."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DatasetError(f"{path}: header truncated at byte offset {len(raw)}")
    zero, type_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or type_code not in _IDX_DTYPES:
        raise DatasetError(f"{path}: bad magic {raw[:4].hex()} at byte offset 0")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise DatasetError(f"{path}: dimension header truncated at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = np.dtype(_IDX_DTYPES[type_code])
    expected = int(np.prod(dims)) * dtype.itemsize
    body = raw[header_end:]
    if len(body) != expected:
        raise DatasetError(f"{path}: expected {expected} data bytes after offset {header_end}, "
                           f"found {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(dims)


def _standardize(x_train: np.ndarray, x_test: np.ndarray, dtype):
    x_train = x_train.astype(np.float64) / 255.0
    x_test = x_test.astype(np.float64) / 255.0
    mean = x_train.mean(axis=(0, 2, 3), keepdims=True)
    std = x_train.std(axis=(0, 2, 3), keepdims=True) + 1e-8
    return ((x_train - mean) / std).astype(dtype), ((x_test - mean) / std).astype(dtype)


def cifar10_binary(train_paths: list, test_path, subset_n: int | None = None,
                   dtype=np.float32) -> Dataset:
    xs, ys = zip(*(read_cifar10_binary(p) for p in train_paths))
    x_tr, y_tr = np.concatenate(xs), np.concatenate(ys)
    if subset_n is not None:
        x_tr, y_tr = x_tr[:subset_n], y_tr[:subset_n]
    x_te, y_te = read_cifar10_binary(test_path)
    x_tr, x_te = _standardize(x_tr, x_te, dtype)
    return Dataset(x_tr, y_tr, x_te, y_te, 10, "cifar10")


def idx_images(train_images, train_labels, test_images, test_labels, subset_n=None,
               dtype=np.float32) -> Dataset:
    def load(img_path, lab_path):
        img = read_idx(img_path)
        lab = read_idx(lab_path).astype(np.int64)
        if img.ndim == 3:
            img = img[:, None]
        if len(img) != len(lab):
            raise DatasetError(f"{img_path}: {len(img)} images but {len(lab)} labels")
        return img, lab

    x_tr, y_tr = load(train_images, train_labels)
    if subset_n is not None:
        x_tr, y_tr = x_tr[:subset_n], y_tr[:subset_n]
    x_te, y_te = load(test_images, test_labels)
    x_tr, x_te = _standardize(x_tr, x_te, dtype)
    n_classes = int(max(y_tr.max(), y_te.max())) + 1
    return Dataset(x_tr, y_tr, x_te, y_te, n_classes, "idx")
