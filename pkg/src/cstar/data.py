"""Datasets: synthetic class-conditioned blobs and a raw byte-image format.

Raw-binary layout (all integers little-endian uint32)::

    magic  b"CSTR"
    count, channels, height, width, num_classes
    count * channels * height * width uint8 pixels (NCHW order)
    count uint8 labels

Pixels are rescaled by 1/255 into [0, 1] on load.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import FormatError

MAGIC = b"CSTR"
_HEADER = struct.Struct("<4s5I")


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) in [0, 1]
    y: np.ndarray  # (N,) int labels
    num_classes: int

    def __post_init__(self):
        if self.x.ndim != 4 or self.y.shape != (self.x.shape[0],):
            raise ValueError(f"inconsistent dataset shapes x {self.x.shape}, y {self.y.shape}")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.x.size and (self.x.min() < 0 or self.x.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self):
        return len(self.y)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.x.shape[1:])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None
                ) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Mini-batches in shuffled order (sequential order if ``rng`` is None)."""
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.x[idx], self.y[idx]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.x[:n], self.y[:n], self.num_classes)


@dataclass(frozen=True)
class BlobSpec:
    """Class means ``0.5 + radius * d_c`` with unit-RMS smooth directions ``d_c``.

    Each sample adds i.i.d. Gaussian pixel noise of std ``noise`` and is
    clipped to [0, 1]. Directions are drawn on a ``grid`` x ``grid`` lattice
    and upsampled, which gives the classes spatial structure.
    """

    num_classes: int = 10
    image_size: int = 12
    channels: int = 3
    train_samples: int = 1000
    test_samples: int = 500
    radius: float = 0.12
    noise: float = 0.25
    grid: int = 4
    seed: int = 0


def _upsample(a: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of the last two axes of ``a`` to ``size`` x ``size``."""
    g = a.shape[-1]
    pos = (np.arange(size) + 0.5) * g / size - 0.5
    pos = np.clip(pos, 0, g - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, g - 1)
    frac = pos - lo
    rows = a[..., lo, :] * (1 - frac)[:, None] + a[..., hi, :] * frac[:, None]
    return rows[..., lo] * (1 - frac) + rows[..., hi] * frac


def class_means(spec: BlobSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    d = rng.standard_normal((spec.num_classes, spec.channels, spec.grid, spec.grid))
    d = _upsample(d, spec.image_size)
    d -= d.mean(axis=(1, 2, 3), keepdims=True)
    d /= np.sqrt((d ** 2).mean(axis=(1, 2, 3), keepdims=True))
    return 0.5 + spec.radius * d


def _sample(spec: BlobSpec, means: np.ndarray, n: int, stream: int) -> Dataset:
    rng = np.random.default_rng([spec.seed, stream])
    y = np.arange(n) % spec.num_classes
    rng.shuffle(y)
    x = means[y] + spec.noise * rng.standard_normal((n,) + means.shape[1:])
    return Dataset(np.clip(x, 0.0, 1.0), y, spec.num_classes)


def synthetic_blobs(spec: BlobSpec = BlobSpec()) -> tuple[Dataset, Dataset]:
    """Balanced (train, test) splits drawn around the same class means."""
    means = class_means(spec)
    return _sample(spec, means, spec.train_samples, 1), _sample(spec, means, spec.test_samples, 2)


def write_raw(path: str | Path, images: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    """Write uint8 images (N, C, H, W) and labels in the raw-binary layout."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise ValueError("images must be a uint8 array of shape (N, C, H, W)")
    n, c, h, w = images.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, n, c, h, w, num_classes))
        f.write(images.tobytes(order="C"))
        f.write(labels.astype(np.uint8).tobytes())


def read_raw(path: str | Path) -> Dataset:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file too short for header ({len(blob)} bytes)")
    magic, n, c, h, w, k = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0")
    npix = n * c * h * w
    expected = _HEADER.size + npix + n
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    x = np.frombuffer(blob, np.uint8, npix, _HEADER.size).reshape(n, c, h, w) / 255.0
    y = np.frombuffer(blob, np.uint8, n, _HEADER.size + npix).astype(np.int64)
    if n and y.max() >= k:
        raise FormatError(f"{path}: label {y.max()} >= num_classes {k}")
    return Dataset(x, y, k)


def split(ds: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    te, tr = order[:n_test], order[n_test:]
    return (Dataset(ds.x[tr], ds.y[tr], ds.num_classes), Dataset(ds.x[te], ds.y[te], ds.num_classes))
