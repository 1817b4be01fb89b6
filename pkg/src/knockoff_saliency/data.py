"""MNIST IDX ingestion, binarisation, class subsets and ground-truth boxes."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

SUBSETS: dict[str, tuple[int, ...]] = {
    "full": tuple(range(10)),
    "comp38": (3, 8),
    "comp56": (5, 6),
}

FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(Exception):
    """Base class for dataset problems."""


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class BlankImageError(DataError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive pixel box."""

    row_min: int
    col_min: int
    row_max: int
    col_max: int

    def __post_init__(self):
        if self.row_min > self.row_max or self.col_min > self.col_max or self.row_min < 0 or self.col_min < 0:
            raise ValueError(f"invalid box {self.as_tuple()}")

    @property
    def area(self) -> int:
        return (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.row_min, self.col_min, self.row_max, self.col_max)

    @classmethod
    def full(cls, shape) -> "BoundingBox":
        return cls(0, 0, shape[0] - 1, shape[1] - 1)


@dataclass(frozen=True)
class Dataset:
    """Images as an (n, 28, 28) float32 array in [0, 1] plus integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    subset: str = "full"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatchError(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, n: int | None) -> "Dataset":
        if n is None:
            return self
        return replace(self, images=self.images[:n], labels=self.labels[:n])


def _read(path: Path) -> bytes:
    path = Path(path)
    if not path.exists() and path.with_suffix(path.suffix + ".gz").exists():
        path = path.with_suffix(path.suffix + ".gz")
    raw = path.read_bytes()
    return gzip.decompress(raw) if path.suffix == ".gz" else raw


def parse_idx_images(raw: bytes) -> np.ndarray:
    if len(raw) < 16:
        raise TruncatedFileError(f"image header needs 16 bytes, got {len(raw)}")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGE_MAGIC:
        raise BadMagicError(f"image file magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise TruncatedFileError(f"image payload has {len(raw) - 16} bytes, header promises {need - 16}")
    pix = np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
    return pix.reshape(n, rows, cols)


def parse_idx_labels(raw: bytes) -> np.ndarray:
    if len(raw) < 8:
        raise TruncatedFileError(f"label header needs 8 bytes, got {len(raw)}")
    magic, n = struct.unpack(">II", raw[:8])
    if magic != LABEL_MAGIC:
        raise BadMagicError(f"label file magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")
    if len(raw) < 8 + n:
        raise TruncatedFileError(f"label payload has {len(raw) - 8} bytes, header promises {n}")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=8).astype(np.int64)


def load_idx(images_path, labels_path, split: str = "train") -> Dataset:
    images = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if len(images) != len(labels):
        raise CountMismatchError(f"{images_path}: {len(images)} images but {labels_path}: {len(labels)} labels")
    return Dataset(images.astype(np.float32) / np.float32(255.0), labels, split=split)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images (n, rows, cols) and labels in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


def load_mnist(data_dir, split: str = "train") -> Dataset:
    data_dir = Path(data_dir)
    img, lab = FILES[split]
    missing = [f for f in (img, lab) if not (data_dir / f).exists() and not (data_dir / (f + ".gz")).exists()]
    if missing:
        raise FileNotFoundError(f"MNIST files missing from {data_dir}: {', '.join(missing)}")
    return load_idx(data_dir / img, data_dir / lab, split=split)


def binarize(ds: Dataset, threshold: float = 0.5) -> Dataset:
    return replace(ds, images=(ds.images >= threshold).astype(np.float32))


def subset(ds: Dataset, classes) -> Dataset:
    classes = sorted(set(int(c) for c in classes))
    if not classes:
        raise ValueError("subset: empty class set")
    keep = np.isin(ds.labels, classes)
    if not keep.any():
        raise EmptyDatasetError(f"no images with labels in {classes}")
    name = next((k for k, v in SUBSETS.items() if list(v) == classes), "custom")
    return replace(ds, images=ds.images[keep], labels=ds.labels[keep], subset=name)


def load_variant(data_dir, variant: str = "full", split: str = "train", threshold: float = 0.5) -> Dataset:
    """Canonical pipeline: load, binarise, restrict to the variant's classes."""
    ds = binarize(load_mnist(data_dir, split), threshold)
    return subset(ds, SUBSETS[variant]) if variant != "full" else ds


def mask_box(mask: np.ndarray) -> BoundingBox | None:
    """Smallest box containing every True pixel, or None if there is none."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox(int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1]))


def ground_truth_box(img: np.ndarray, threshold: float = 0.1) -> BoundingBox:
    box = mask_box(np.asarray(img) > threshold)
    if box is None:
        raise BlankImageError(f"no pixel above {threshold}")
    return box
