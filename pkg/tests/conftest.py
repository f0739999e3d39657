import numpy as np
import pytest

from ulu_kit.data_processor import Dataset, synthetic_blobs


def write_idx_pair(tmp_path, pixels: np.ndarray, labels: np.ndarray, prefix: str = "fixture"):
    """
    Write uint8 pixels [N, H, W] and labels [N] as IDX files, building the
    headers with numpy big-endian arrays rather than the package's writer.
    """
    images_path = tmp_path / f"{prefix}-images-idx3-ubyte"
    labels_path = tmp_path / f"{prefix}-labels-idx1-ubyte"
    image_header = np.array([0x803, *pixels.shape], dtype=">u4").tobytes()
    label_header = np.array([0x801, labels.shape[0]], dtype=">u4").tobytes()
    images_path.write_bytes(image_header + pixels.astype(np.uint8).tobytes())
    labels_path.write_bytes(label_header + labels.astype(np.uint8).tobytes())
    return images_path, labels_path


@pytest.fixture
def idx_fixture(tmp_path):
    rng = np.random.default_rng(1234)
    pixels = rng.integers(0, 256, size=(4, 28, 28), dtype=np.uint8)
    labels = np.array([3, 1, 4, 1], dtype=np.uint8)
    images_path, labels_path = write_idx_pair(tmp_path, pixels, labels)
    return images_path, labels_path, pixels, labels


@pytest.fixture(scope="session")
def blobs_small():
    """Balanced 10-class 12x12 blobs, 30 per class"""
    return synthetic_blobs(num_classes=10, n_per_class=30, image_size=12, seed=0)


@pytest.fixture(scope="session")
def blobs_split(blobs_small):
    train = blobs_small.subset(np.arange(0, 200), "blobs-train")
    test = blobs_small.subset(np.arange(200, 300), "blobs-test")
    return train, test


@pytest.fixture
def tiny_dataset():
    images = np.zeros((8, 4, 4))
    images[:, 0, 0] = np.linspace(0.0, 1.0, 8)
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    return Dataset(images, labels, "tiny", num_classes=3)
