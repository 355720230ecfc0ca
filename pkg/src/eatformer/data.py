"""Image datasets: seeded synthetic blobs and the binary ``EATD`` container.

Container layout (all integers little-endian)::

    magic   4 bytes  b"EATD"
    version u32      1
    count   u32      number of records
    C, H, W u16 x 3  image geometry shared by every record
    count x (label u16, C*H*W bytes of u8 pixels in C, H, W order)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .fileio import atomic_write

DATA_MAGIC = b"EATD"
DATA_VERSION = 1
_HEADER = struct.Struct("<4sII3H")


@dataclass
class ImageDataset:
    images: np.ndarray  # (N, C, H, W) uint8
    labels: np.ndarray  # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DataError(f"images must be uint8 (N, C, H, W), got {self.images.dtype} {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.images.shape[0]} images but labels have shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 0xFFFF):
            raise DataError("labels must fit in an unsigned 16-bit field")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def as_float(self) -> np.ndarray:
        """Pixels mapped from [0, 255] to [-1, 1]."""
        return pixels_to_float(self.images)


def pixels_to_float(images) -> np.ndarray:
    return np.asarray(images, dtype=np.float64) / 127.5 - 1.0


def synthetic_blobs(num_samples: int = 200, num_classes: int = 10, size: int = 32, seed: int = 0,
                    noise: float = 0.15) -> ImageDataset:
    """Gaussian-blob images: each class has its own centre, width and colour.

    Samples jitter the centre by about one pixel and add pixel noise, so the
    classes are separable but no two images are identical.
    """
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2 * size, 0.8 * size, size=(num_classes, 2))
    widths = rng.uniform(0.08 * size, 0.2 * size, size=num_classes)
    colours = rng.uniform(0.2, 1.0, size=(num_classes, 3))
    labels = np.arange(num_samples) % num_classes
    rng.shuffle(labels)
    rows, cols = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    images = np.empty((num_samples, 3, size, size), dtype=np.uint8)
    for n, c in enumerate(labels):
        cy, cx = centres[c] + rng.normal(0.0, 1.0, size=2)
        blob = np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * widths[c] ** 2))
        img = colours[c][:, None, None] * blob[None] + rng.normal(0.0, noise, size=(3, size, size))
        images[n] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return ImageDataset(images, labels)


def encode_dataset(ds: ImageDataset) -> bytes:
    N, C, H, W = ds.images.shape
    if max(C, H, W) > 0xFFFF:
        raise DataError(f"image geometry {C}x{H}x{W} does not fit 16-bit fields")
    record = np.dtype([("label", "<u2"), ("pixels", "u1", (C * H * W,))])
    body = np.empty(N, dtype=record)
    body["label"] = ds.labels
    body["pixels"] = ds.images.reshape(N, C * H * W)
    return _HEADER.pack(DATA_MAGIC, DATA_VERSION, N, C, H, W) + body.tobytes()


def decode_dataset(payload: bytes) -> ImageDataset:
    if len(payload) < _HEADER.size:
        raise DataError(f"dataset header truncated ({len(payload)} bytes)")
    magic, version, N, C, H, W = _HEADER.unpack_from(payload)
    if magic != DATA_MAGIC:
        raise DataError(f"bad dataset magic {magic!r}; expected {DATA_MAGIC!r}")
    if version != DATA_VERSION:
        raise DataError(f"unsupported dataset version {version}")
    record = np.dtype([("label", "<u2"), ("pixels", "u1", (C * H * W,))])
    expected = _HEADER.size + N * record.itemsize
    if len(payload) != expected:
        raise DataError(f"dataset body has {len(payload)} bytes, expected {expected}")
    body = np.frombuffer(payload, dtype=record, offset=_HEADER.size, count=N)
    return ImageDataset(body["pixels"].reshape(N, C, H, W).copy(), body["label"].astype(np.int64))


def save_dataset(ds: ImageDataset, path) -> None:
    atomic_write(path, encode_dataset(ds))


def load_dataset(path) -> ImageDataset:
    try:
        payload = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return decode_dataset(payload)


__all__ = [
    "ImageDataset",
    "pixels_to_float",
    "synthetic_blobs",
    "encode_dataset",
    "decode_dataset",
    "save_dataset",
    "load_dataset",
]
