import gzip
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .errors import (BadMagicError, CountMismatchError, InsufficientSamplesError,
                     InvalidDatasetError, TruncatedError)

logger = logging.getLogger(__name__)

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

PathLike = Union[str, Path]


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Grayscale images with integer class labels

    Args:
        images: [N, H, W] float64 pixels in [0, 1]
        labels: [N] integer labels in [0, num_classes)
        name: Human-readable name used in logs and reports
        num_classes: Number of classes the labels index into
    """
    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_classes: int = 10

    def __post_init__(self):
        images = np.array(self.images, dtype=np.float64)
        labels = np.array(self.labels)

        if images.ndim != 3:
            raise InvalidDatasetError(f"{self.name}: images must be [N, H, W], got shape {images.shape}")
        if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
            raise InvalidDatasetError(
                f"{self.name}: expected {images.shape[0]} labels, got shape {labels.shape}"
            )
        if self.num_classes < 1:
            raise InvalidDatasetError(f"{self.name}: num_classes must be >= 1, got {self.num_classes}")
        if images.size and not (np.all(np.isfinite(images)) and images.min() >= 0.0 and images.max() <= 1.0):
            raise InvalidDatasetError(f"{self.name}: pixel values must be finite and within [0, 1]")
        if labels.size:
            if not np.issubdtype(labels.dtype, np.integer):
                raise InvalidDatasetError(f"{self.name}: labels must be integers, got dtype {labels.dtype}")
            if labels.min() < 0 or labels.max() >= self.num_classes:
                raise InvalidDatasetError(
                    f"{self.name}: labels must lie in [0, {self.num_classes}), "
                    f"got range [{labels.min()}, {labels.max()}]"
                )

        labels = labels.astype(np.int64)
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int]:
        return int(self.images.shape[1]), int(self.images.shape[2])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, name: Optional[str] = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], name or self.name, self.num_classes)


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as handle:
            return handle.read()
    return path.read_bytes()


def _parse_labels(blob: bytes, source: str) -> np.ndarray:
    if len(blob) < 8:
        raise TruncatedError(f"{source}: label header needs 8 bytes, file has {len(blob)}")
    magic, count = struct.unpack(">II", blob[:8])
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"{source}: expected label magic 0x{IDX_LABELS_MAGIC:08x}, got 0x{magic:08x}")
    if len(blob) - 8 < count:
        raise TruncatedError(f"{source}: header announces {count} labels, file holds {len(blob) - 8}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=8)


def _parse_images(blob: bytes, source: str) -> np.ndarray:
    if len(blob) < 16:
        raise TruncatedError(f"{source}: image header needs 16 bytes, file has {len(blob)}")
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"{source}: expected image magic 0x{IDX_IMAGES_MAGIC:08x}, got 0x{magic:08x}")
    expected = count * rows * cols
    if len(blob) - 16 < expected:
        raise TruncatedError(
            f"{source}: header announces {count}x{rows}x{cols} pixels, file holds {len(blob) - 16} bytes"
        )
    pixels = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=16)
    return pixels.reshape(count, rows, cols)


def load_idx(images_path: PathLike, labels_path: PathLike, name: str = "mnist",
             num_classes: int = 10) -> Dataset:
    """
    Read an IDX image/label file pair (plain or gzip-compressed)

    Args:
        images_path: IDX3 file of uint8 images
        labels_path: IDX1 file of uint8 labels
        name: Name of the resulting Dataset
        num_classes: Number of classes the labels index into

    Returns:
        Dataset with pixels scaled to [0, 1]
    """
    images = _parse_images(_read_bytes(images_path), str(images_path))
    labels = _parse_labels(_read_bytes(labels_path), str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )

    logger.info("Loaded %d images of %dx%d from %s", images.shape[0], images.shape[1], images.shape[2], images_path)
    return Dataset(images / 255.0, labels.astype(np.int64), name, num_classes)


def write_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike):
    """Write a Dataset as an IDX pair; pixels are rounded to the nearest k/255"""
    count, rows, cols = dataset.images.shape
    if dataset.num_classes > 256:
        raise InvalidDatasetError(f"IDX labels are single bytes, cannot store {dataset.num_classes} classes")

    pixels = np.rint(dataset.images * 255.0).astype(np.uint8)
    image_blob = struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + pixels.tobytes()
    label_blob = struct.pack(">II", IDX_LABELS_MAGIC, count) + dataset.labels.astype(np.uint8).tobytes()

    for path, blob in ((Path(images_path), image_blob), (Path(labels_path), label_blob)):
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.suffix == ".gz":
            with gzip.open(path, "wb") as handle:
                handle.write(blob)
        else:
            path.write_bytes(blob)


def subset_split(dataset: Dataset, train_n: int, test_n: int, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Draw disjoint, class-stratified train and test subsets

    Each class contributes train_n // num_classes training and
    test_n // num_classes test samples; remainders are dropped. Samples keep
    the order of a seeded permutation, so classes are interleaved.

    Args:
        dataset: Source dataset
        train_n: Requested training-set size
        test_n: Requested test-set size
        seed: Seed of the permutation

    Returns:
        (train, test) subsets with no shared source index
    """
    if train_n < 0 or test_n < 0:
        raise InsufficientSamplesError(f"Subset sizes must be >= 0, got train={train_n}, test={test_n}")
    if train_n + test_n > len(dataset):
        raise InsufficientSamplesError(
            f"{dataset.name} has {len(dataset)} samples, cannot draw {train_n} + {test_n}"
        )
    if seed < 0:
        raise InsufficientSamplesError(f"Seed must be >= 0, got {seed}")

    per_train = train_n // dataset.num_classes
    per_test = test_n // dataset.num_classes
    order = np.random.default_rng(seed).permutation(len(dataset))
    shuffled_labels = dataset.labels[order]

    train_idx, test_idx = [], []
    for label in range(dataset.num_classes):
        members = order[shuffled_labels == label]
        if members.shape[0] < per_train + per_test:
            raise InsufficientSamplesError(
                f"{dataset.name}: class {label} has {members.shape[0]} samples, "
                f"{per_train + per_test} requested"
            )
        train_idx.append(members[:per_train])
        test_idx.append(members[per_train:per_train + per_test])

    rank = np.empty(len(dataset), dtype=np.int64)
    rank[order] = np.arange(len(dataset))

    def interleave(parts):
        picked = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
        return picked[np.argsort(rank[picked], kind="stable")]

    train = dataset.subset(interleave(train_idx), f"{dataset.name}-train")
    test = dataset.subset(interleave(test_idx), f"{dataset.name}-test")
    logger.info("Split %s into %d train / %d test samples (seed %d)", dataset.name, len(train), len(test), seed)
    return train, test


def synthetic_blobs(num_classes: int = 10, n_per_class: int = 100, image_size: int = 28,
                    seed: int = 0, noise: float = 0.1) -> Dataset:
    """
    Offline stand-in for MNIST: one Gaussian blob per image plus pixel noise,
    clipped to [0, 1]. Class centers are spread on a circle and class widths
    grow geometrically, so both the MLP (location) and the mean-pooled CNN
    (width) can tell the classes apart.
    """
    if num_classes < 1 or n_per_class < 0 or image_size < 4:
        raise InvalidDatasetError(
            f"Need num_classes >= 1, n_per_class >= 0 and image_size >= 4, "
            f"got {num_classes}, {n_per_class}, {image_size}"
        )

    rng = np.random.default_rng(seed)
    total = num_classes * n_per_class
    labels = np.tile(np.arange(num_classes), n_per_class)

    middle = (image_size - 1) / 2.0
    radius = 0.3 * image_size
    angles = 2.0 * math.pi * np.arange(num_classes) / num_classes
    centers = np.stack([middle + radius * np.sin(angles), middle + radius * np.cos(angles)], axis=1)
    base_sigma = max(image_size / 8.0, 0.75)
    widths = base_sigma * 0.5 * 3.0 ** (np.arange(num_classes) / max(num_classes - 1, 1))

    jitter = rng.normal(0.0, 0.25 * base_sigma, size=(total, 2))
    amplitude = rng.uniform(0.9, 1.0, size=total)
    rows, cols = np.meshgrid(np.arange(image_size), np.arange(image_size), indexing="ij")

    sample_centers = centers[labels] + jitter
    dist2 = ((rows[None] - sample_centers[:, 0, None, None]) ** 2
             + (cols[None] - sample_centers[:, 1, None, None]) ** 2)
    sigma = widths[labels][:, None, None]
    images = amplitude[:, None, None] * np.exp(-dist2 / (2.0 * sigma * sigma))
    images = images + rng.normal(0.0, noise, size=images.shape)
    return Dataset(np.clip(images, 0.0, 1.0), labels, "synthetic", num_classes)


def _find_file(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"Neither {stem} nor {stem}.gz found in {data_dir}")


def load_mnist_subset(data_dir: PathLike, train_n: int, test_n: int, seed: int) -> Tuple[Dataset, Dataset]:
    """
    Stratified train/test subsets of MNIST

    Training samples come from the training files, test samples from the
    t10k files, each split with the same seed.
    """
    data_dir = Path(data_dir)
    train_files = [_find_file(data_dir, stem) for stem in MNIST_FILES["train"]]
    test_files = [_find_file(data_dir, stem) for stem in MNIST_FILES["test"]]

    train_pool = load_idx(*train_files, name="mnist")
    test_pool = load_idx(*test_files, name="mnist-t10k")
    train, _ = subset_split(train_pool, train_n, 0, seed)
    _, test = subset_split(test_pool, 0, test_n, seed)
    return train, test


def synthetic_split(train_n: int, test_n: int, seed: int, image_size: int = 28,
                    num_classes: int = 10) -> Tuple[Dataset, Dataset]:
    n_per_class = math.ceil((train_n + test_n) / num_classes)
    pool = synthetic_blobs(num_classes, n_per_class, image_size, seed)
    return subset_split(pool, train_n, test_n, seed)
