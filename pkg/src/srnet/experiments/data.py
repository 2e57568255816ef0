"""IDX (MNIST) parsing, label shuffling and a synthetic fallback dataset."""

import math
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import DataError, IdxParseError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class IdxDataset:
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx):
        return IdxDataset(self.images[idx], self.labels[idx])


def _read_idx(path, expected_magic, ndim):
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(raw) < 4:
        raise IdxParseError(f"{path}: truncated magic", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxParseError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxParseError(f"{path}: truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = math.prod(dims)
    if len(raw) < header_end + count:
        raise IdxParseError(
            f"{path}: expected {count} data bytes, found {len(raw) - header_end}", offset=len(raw)
        )
    if len(raw) > header_end + count:
        raise IdxParseError(f"{path}: {len(raw) - header_end - count} trailing bytes", offset=header_end + count)
    data = np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end)
    return data.reshape(dims)


def load_idx(images_path, labels_path):
    """Images flattened to rows scaled by 1/255, labels as ``int64``."""
    images = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, LABEL_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return IdxDataset(x, labels.astype(np.int64))


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 images ``(n, rows, cols)`` and labels in IDX format (used for fixtures)."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def shuffle_labels(labels, fraction, rng):
    """Permute exactly ``floor(fraction * n)`` labels among themselves.

    Returns ``(new_labels, positions, permutation)``; ``positions`` are the
    affected indices and ``new[positions] = old[positions[permutation]]``,
    so the original labels are recovered with :func:`unshuffle_labels`.
    """
    if not 0.0 <= fraction <= 1.0:
        raise DataError(f"shuffle fraction must lie in [0, 1], got {fraction}")
    labels = np.asarray(labels)
    n = labels.shape[0]
    k = int(math.floor(fraction * n))
    positions = np.sort(rng.choice(n, size=k, replace=False))
    perm = rng.permutation(k)
    out = labels.copy()
    out[positions] = labels[positions[perm]]
    return out, positions, perm


def unshuffle_labels(labels, positions, perm):
    out = np.asarray(labels).copy()
    restored = np.empty_like(out[positions])
    restored[perm] = out[positions]
    out[positions] = restored
    return out


def gaussian_blobs(rng, n, dim=784, classes=2, separation=10.0):
    """Balanced classes with unit Gaussian noise per coordinate around random class centres.

    Centre coordinates have standard deviation ``separation / sqrt(dim)``, so
    class means sit roughly ``separation * sqrt(2)`` apart.
    """
    centers = rng.standard_normal((classes, dim)) * (separation / math.sqrt(dim))
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    x = centers[labels] + rng.standard_normal((n, dim))
    return IdxDataset(x, labels.astype(np.int64))
