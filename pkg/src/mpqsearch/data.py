"""Dataset containers, the CIFAR-10 binary reader, raw tensor files and synthetic blobs."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 3073
RAW_MAGIC = b"MPQRAW01"


@dataclass
class Dataset:
    images: np.ndarray  # N x C x H x W float64
    labels: np.ndarray  # N int64
    classes: int
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"images {self.images.shape} do not match labels {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index, name: str | None = None) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.classes, name or self.name)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield ``(images, labels)`` minibatches, shuffled when ``rng`` is given."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start : start + batch_size]
            yield self.images[idx], self.labels[idx]


def _normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (images - mean) / std


def load_cifar_binary(
    path,
    classes: int = 10,
    mean: Sequence[float] = CIFAR_MEAN,
    std: Sequence[float] = CIFAR_STD,
    keep_labels: Sequence[int] | None = None,
) -> Dataset:
    """Read a CIFAR-10 binary batch (1 label byte + 3072 plane-ordered pixel bytes per record).

    ``keep_labels`` selects a class subset; kept labels are renumbered
    ``0..len(keep_labels)-1`` in the given order.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
        raise ValueError(f"{path}: truncated record at byte offset {whole} (file length {len(raw)})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"{path}: label {labels[i]} >= {classes} at byte offset {i * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    images = _normalize(images, mean, std)
    if keep_labels is not None:
        keep = list(keep_labels)
        mask = np.isin(labels, keep)
        remap = {lab: i for i, lab in enumerate(keep)}
        labels = np.array([remap[int(lab)] for lab in labels[mask]], dtype=np.int64)
        images = images[mask]
        classes = len(keep)
    return Dataset(images, labels, classes, name=path.stem)


def save_raw_tensor(dataset: Dataset, path) -> None:
    """Write the raw-tensor format: magic, u32 N/C/H/W/classes, u32 labels, f64 pixels (all LE)."""
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<5I", n, c, h, w, dataset.classes))
        fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(dataset.images.astype("<f8").tobytes())


def load_raw_tensor(path, mean: Sequence[float] | None = None, std: Sequence[float] | None = None) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw-tensor file")
    n, c, h, w, classes = struct.unpack_from("<5I", raw, 8)
    off = 8 + 20
    need = off + 4 * n + 8 * n * c * h * w
    if len(raw) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(raw)}")
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    images = np.frombuffer(raw, dtype="<f8", count=n * c * h * w, offset=off + 4 * n).reshape(n, c, h, w)
    images = images.astype(np.float64)
    if mean is not None and std is not None:
        images = _normalize(images, mean, std)
    return Dataset(images, labels, classes, name=path.stem)


def generate_synthetic(
    classes: int,
    n: int,
    shape: Sequence[int] = (3, 16, 16),
    seed: int = 0,
    noise: float = 0.3,
    amplitude: float = 1.0,
    name: str | None = None,
) -> Dataset:
    """Balanced Gaussian class-blob images.

    Each class owns a mean pattern: a Gaussian bump at a seeded location with
    seeded per-channel signed amplitudes.  Samples add i.i.d. noise of std
    ``noise``.  Different seeds give different class patterns.
    """
    if n < classes:
        raise ValueError(f"need n >= classes, got n={n}, classes={classes}")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    patterns = np.empty((classes, c, h, w))
    for k in range(classes):
        cy, cx = rng.uniform(0.2, 0.8) * (h - 1), rng.uniform(0.2, 0.8) * (w - 1)
        width = rng.uniform(0.12, 0.25) * min(h, w)
        bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * width**2))
        amps = rng.choice([-1.0, 1.0], size=c) * rng.uniform(0.5, 1.0, size=c)
        patterns[k] = amplitude * amps[:, None, None] * bump[None]
    labels = rng.permutation(np.arange(n) % classes)
    images = patterns[labels] + noise * rng.standard_normal((n, c, h, w))
    return Dataset(images, labels, classes, name=name or f"synthetic-{seed}")
