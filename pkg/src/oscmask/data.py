"""Dataset loading (IDX, CIFAR-10 binary) and seeded subsetting.

Pixels are always stored as float64 in ``[0, 1]`` with shape ``N×C×H×W``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .exceptions import FormatError, InvalidInputError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
DATA_DIR_ENV = "OSCMASK_DATA_DIR"


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_classes: int = 10
    # position of each sample in the file it was loaded from
    source_index: np.ndarray | None = None

    def __post_init__(self):
        if self.source_index is None:
            object.__setattr__(self, "source_index", np.arange(len(self.labels)))
        if len(self.images) != len(self.labels):
            raise InvalidInputError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise InvalidInputError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InvalidInputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def take(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], name or self.name, self.num_classes,
                       self.source_index[indices])


def _read_bytes(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    raw = path.read_bytes()
    if path.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _parse_idx(raw, expected_magic, path):
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)}")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} at byte offset 0 (expected 0x{expected_magic:08x})")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) != need:
        raise FormatError(f"{path}: expected {need} bytes, file ends at byte offset {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, name="mnist", num_classes=10) -> Dataset:
    """Load an IDX image/label pair (optionally gzip-compressed)."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if len(images) != len(labels):
        raise FormatError(f"count mismatch: {len(images)} images vs {len(labels)} labels (byte offset 4)")
    images = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(images, labels.astype(np.int64), name, num_classes)


def write_idx(images_u8, labels_u8, images_path, labels_path):
    """Write uint8 ``N×H×W`` images and ``N`` labels as IDX files (``.gz`` honoured)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    img = struct.pack(">IIII", IDX_IMAGES_MAGIC, *images_u8.shape) + images_u8.tobytes()
    lab = struct.pack(">II", IDX_LABELS_MAGIC, len(labels_u8)) + labels_u8.tobytes()
    for path, raw in ((images_path, img), (labels_path, lab)):
        path = Path(path)
        if path.suffix == ".gz":
            raw = gzip.compress(raw, mtime=0)
        path.write_bytes(raw)


def load_cifar10_bin(paths, name="cifar10") -> Dataset:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        raw = _read_bytes(path)
        if len(raw) % CIFAR_RECORD:
            whole = len(raw) // CIFAR_RECORD * CIFAR_RECORD
            raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD} (partial record at byte offset {whole})")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec.size and rec[:, 0].max() > 9:
            raise FormatError(f"{path}: label byte out of range 0-9")
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(images), np.concatenate(labels), name, 10)


def sample_subset(ds: Dataset, n, seed) -> Dataset:
    """Uniform sample of ``n`` items without replacement."""
    if n > len(ds) or n < 0:
        raise InvalidInputError(f"cannot sample {n} items from a dataset of {len(ds)}")
    idx = np.random.default_rng(seed).permutation(len(ds))[:n]
    return ds.take(idx)


def split(ds: Dataset, n_holdout, seed):
    """Disjoint ``(rest, holdout)`` partition with a seeded holdout of size ``n_holdout``."""
    if n_holdout > len(ds):
        raise InvalidInputError(f"holdout of {n_holdout} exceeds dataset of {len(ds)}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    hold, rest = np.sort(perm[:n_holdout]), np.sort(perm[n_holdout:])
    return ds.take(rest, ds.name + "-train"), ds.take(hold, ds.name + "-eval")


def bundled_mnist() -> Dataset:
    """10,000 real MNIST digits (the first 10k of the official training set) shipped with the package."""
    root = resources.files("oscmask") / "datasets"
    with resources.as_file(root / "mnist10k-images-idx3-ubyte.gz") as img, \
            resources.as_file(root / "mnist10k-labels-idx1-ubyte.gz") as lab:
        return load_idx(img, lab, name="mnist10k")


def default_data_dir():
    return Path(os.environ.get(DATA_DIR_ENV, "data"))
