"""
Pytest fixtures for the loss-estimation pipeline.

These fixtures write small, deterministic dataset files in the real on-disk
formats (IDX, CIFAR binary) and build tiny labelled datasets whose classes are
easy to separate, so training tests finish in seconds.
"""

import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from confidence_iqn import tensor_core as tc
from confidence_iqn.data_io import LabeledDataset, Normalization, Split, normalize
from confidence_iqn.tensor_core import Tensor


# ── File writers ─────────────────────────────────────────────────────


def write_idx_images(path: Path, images: np.ndarray, compress: bool = False) -> Path:
    """Write n x h x w uint8 images as an IDX3 file."""
    n, h, w = images.shape
    payload = b"\x00\x00\x08\x03" + struct.pack(">III", n, h, w) + images.astype(np.uint8).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(gzip.compress(payload) if compress else payload)
    return path


def write_idx_labels(path: Path, labels: np.ndarray, compress: bool = False) -> Path:
    payload = b"\x00\x00\x08\x01" + struct.pack(">I", len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(gzip.compress(payload) if compress else payload)
    return path


def write_cifar(path: Path, labels: np.ndarray, pixels: np.ndarray, coarse: np.ndarray | None = None) -> Path:
    """
    Write CIFAR binary records; pixels are n x 3 x 32 x 32 uint8.

    With `coarse` given the records use the CIFAR-100 layout (coarse, fine, pixels).
    """
    records = []
    for i in range(len(labels)):
        head = bytes([int(coarse[i]), int(labels[i])]) if coarse is not None else bytes([int(labels[i])])
        records.append(head + pixels[i].astype(np.uint8).tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(records))
    return path


# ── Synthetic images ─────────────────────────────────────────────────


def generate_class_images(
    n: int,
    num_classes: int = 10,
    size: int = 28,
    channels: int = 1,
    seed: int = 42,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Raw uint8 images where class k lights up the k-th horizontal band.

    Returns (images n x channels x size x size, labels n).
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = rng.integers(0, 40, size=(n, channels, size, size))
    band = max(size // num_classes, 1)
    for i, label in enumerate(labels):
        top = (label * band) % size
        images[i, :, top : top + band, :] = 220
    return images.astype(np.uint8), labels.astype(np.int64)


def write_mnist_fixture(data_dir: Path, n_train: int = 96, n_test: int = 48, compress: bool = False) -> Path:
    """Standard MNIST file names under data_dir/mnist, filled with class-band images."""
    suffix = ".gz" if compress else ""
    root = data_dir / "mnist"
    for prefix, n, seed in (("train", n_train, 1), ("t10k", n_test, 2)):
        images, labels = generate_class_images(n, seed=seed)
        write_idx_images(root / f"{prefix}-images-idx3-ubyte{suffix}", images[:, 0], compress)
        write_idx_labels(root / f"{prefix}-labels-idx1-ubyte{suffix}", labels, compress)
    return data_dir


def make_tiny_dataset(
    n: int = 32,
    num_classes: int = 3,
    size: int = 8,
    split: Split = Split.TRAIN,
    seed: int = 0,
) -> LabeledDataset:
    images, labels = generate_class_images(n, num_classes, size, seed=seed)
    raw = LabeledDataset(
        images=Tensor(images.astype(np.float32)),
        labels=labels,
        num_classes=num_classes,
        split=split,
        source="tiny",
    )
    return normalize(raw, (0.2,), (0.3,))


# ── Fixtures ─────────────────────────────────────────────────────────


@pytest.fixture
def float64():
    """Run the test body with float64 as the default precision."""
    with tc.precision(np.float64):
        yield


@pytest.fixture
def tiny_train():
    return make_tiny_dataset(32, split=Split.TRAIN, seed=0)


@pytest.fixture
def tiny_test():
    return make_tiny_dataset(24, split=Split.TEST, seed=1)


@pytest.fixture
def tiny_normalization():
    return Normalization(mean=(0.2,), std=(0.3,))


@pytest.fixture
def mnist_dir(tmp_path):
    """A data directory holding a small MNIST-format fixture."""
    return write_mnist_fixture(tmp_path / "data")


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch, tmp_path):
    """Keep user environment and `.env` files out of configuration tests."""
    for key in (
        "CONFIDENCE_IQN_DATA_DIR",
        "CONFIDENCE_IQN_RUNS_DIR",
        "CONFIDENCE_IQN_LOG_LEVEL",
        "CONFIDENCE_IQN_LOG_FORMAT",
    ):
        monkeypatch.delenv(key, raising=False)
    monkeypatch.chdir(tmp_path)
