"""Datasets: a built-in synthetic image generator and an IDX file reader.

The synthetic task is two-class: an oriented bar versus a cross made of
two perpendicular bars, on a single-channel grid with seeded Gaussian
noise. It is learnable in a few epochs yet small enough that an entire
search fits in CPU seconds, and it needs no downloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "Dataset",
    "synthetic_dataset",
    "load_idx_array",
    "load_idx_dataset",
]

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class Dataset:
    """Images (N, C, H, W) float64 with integer labels (N,)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x.ndim != 4 or self.y.shape != (self.x.shape[0],):
            raise ValueError(
                f"expected (N, C, H, W) images with (N,) labels, got "
                f"{self.x.shape} and {self.y.shape}"
            )

    def __len__(self):
        return self.x.shape[0]

    @property
    def classes(self) -> int:
        return int(self.y.max()) + 1

    def split(self, fraction: float) -> tuple["Dataset", "Dataset"]:
        """Disjoint head/tail split; the generator already shuffles."""
        if not 0.0 < fraction < 1.0:
            raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
        cut = int(len(self) * fraction)
        if cut == 0 or cut == len(self):
            raise ValueError(f"split fraction {fraction} leaves an empty part")
        return (Dataset(self.x[:cut], self.y[:cut]),
                Dataset(self.x[cut:], self.y[cut:]))


def _line_mask(size: int, angle: float, width: float) -> np.ndarray:
    """Pixels within ``width`` of the line through the center at ``angle``."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    dist = np.abs((yy - c) * np.cos(angle) - (xx - c) * np.sin(angle))
    return dist <= width


def synthetic_dataset(n: int = 256, size: int = 16, noise: float = 0.3,
                      seed: int = 0) -> Dataset:
    """Oriented bars (class 0) vs crosses (class 1) with seeded noise."""
    rng = np.random.default_rng(seed)
    x = np.empty((n, 1, size, size))
    y = rng.integers(0, 2, n).astype(np.int64)
    for i in range(n):
        angle = rng.uniform(0.0, np.pi)
        img = _line_mask(size, angle, 1.0).astype(np.float64)
        if y[i] == 1:
            img = np.maximum(img, _line_mask(size, angle + np.pi / 2, 1.0))
        img += rng.normal(0.0, noise, (size, size))
        x[i, 0] = img
    return Dataset(x, y)


def _read_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic_bytes = fh.read(4)
        if len(magic_bytes) != 4:
            raise ValueError(f"{path}: truncated IDX header")
        (magic,) = struct.unpack(">I", magic_bytes)
        if magic == IDX_MAGIC_IMAGES:
            ndim = 3
        elif magic == IDX_MAGIC_LABELS:
            ndim = 1
        else:
            raise ValueError(f"{path}: unknown IDX magic 0x{magic:08x}")
        dims = struct.unpack(f">{ndim}I", fh.read(4 * ndim))
        data = np.frombuffer(fh.read(), dtype=np.uint8)
    expected = int(np.prod(dims))
    if data.size != expected:
        raise ValueError(
            f"{path}: IDX payload has {data.size} bytes, header promises {expected}"
        )
    return data.reshape(dims)


def load_idx_array(path) -> np.ndarray:
    """Raw IDX contents: (N, H, W) uint8 for images, (N,) uint8 for labels."""
    return _read_idx(path)


def load_idx_dataset(images_path, labels_path) -> Dataset:
    """IDX image/label pair as a Dataset, pixel values scaled to [0, 1]."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path} does not hold an image tensor")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path} does not hold a label vector")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image count {images.shape[0]} differs from label count {labels.shape[0]}"
        )
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64))
