"""
Dataset Ingestion

Bit-exact readers for MNIST IDX files (optionally gzip-compressed) and the
CIFAR-10/100 binary record files, per-channel normalization, seeded batching and
synthetic probe/oracle data.

File layouts:
    IDX      big-endian: magic (00 00 08 <ndim>), one u32 per dimension, u8 payload.
    CIFAR-10  3073-byte records: label, then 1024 R, 1024 G, 1024 B pixels.
    CIFAR-100 3074-byte records: coarse label, fine label, then 3072 pixels.
"""

import gzip
import logging
import struct
import zlib
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ContractError, FormatError, MissingArtifactError, ParameterError, TruncatedFileError
from .tensor_core import Rng, Tensor, default_dtype

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = b"\x00\x00\x08\x03"
IDX_LABELS_MAGIC = b"\x00\x00\x08\x01"
GZIP_MAGIC = b"\x1f\x8b"

CIFAR_PIXELS = 3 * 32 * 32
PROBE_LABEL = -1

FETCH_HINT = "run scripts/fetch_datasets.py or point CONFIDENCE_IQN_DATA_DIR at the dataset files"


class Split(Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True)
class Normalization:
    """Per-channel constants applied as (pixel/255 - mean) / std."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    def __post_init__(self):
        if len(self.mean) != len(self.std):
            raise ParameterError(f"mean has {len(self.mean)} channels but std has {len(self.std)}")
        if any(s <= 0 for s in self.std):
            raise ParameterError(f"std must be > 0 for every channel, got {self.std}")

    @property
    def channels(self) -> int:
        return len(self.mean)

    def _view(self, values: tuple[float, ...], dtype) -> np.ndarray:
        return np.asarray(values, dtype=dtype).reshape(1, -1, 1, 1)

    def apply(self, raw: np.ndarray) -> np.ndarray:
        dtype = raw.dtype
        return ((raw / dtype.type(255.0)) - self._view(self.mean, dtype)) / self._view(self.std, dtype)

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        dtype = normalized.dtype
        return (normalized * self._view(self.std, dtype) + self._view(self.mean, dtype)) * dtype.type(255.0)


# Defaults; the source experiments never state their normalization.
MNIST_NORMALIZATION = Normalization(mean=(0.1307,), std=(0.3081,))
CIFAR10_NORMALIZATION = Normalization(mean=(0.4914, 0.4822, 0.4465), std=(0.2470, 0.2435, 0.2616))
CIFAR100_NORMALIZATION = Normalization(mean=(0.5071, 0.4865, 0.4409), std=(0.2673, 0.2564, 0.2762))


class DatasetKind(Enum):
    MNIST = "mnist"
    CIFAR10 = "cifar10"
    CIFAR100 = "cifar100"

    @property
    def num_classes(self) -> int:
        return 100 if self is DatasetKind.CIFAR100 else 10

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (1, 28, 28) if self is DatasetKind.MNIST else (3, 32, 32)

    @property
    def normalization(self) -> Normalization:
        return {
            DatasetKind.MNIST: MNIST_NORMALIZATION,
            DatasetKind.CIFAR10: CIFAR10_NORMALIZATION,
            DatasetKind.CIFAR100: CIFAR100_NORMALIZATION,
        }[self]


@dataclass
class LabeledDataset:
    """
    Images with integer class labels.

    `normalization` is None while images still hold raw 0..255 pixel values.
    Probe datasets carry PROBE_LABEL everywhere and never count toward accuracy.
    """

    images: Tensor
    labels: np.ndarray
    num_classes: int
    split: Split
    source: str
    normalization: Normalization | None = None
    is_probe: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise FormatError(f"{self.source}: images must be n x c x h x w, got {self.images.shape}")
        if self.images.shape[0] != len(self.labels):
            raise FormatError(
                f"{self.source}: {self.images.shape[0]} images but {len(self.labels)} labels"
            )
        if self.is_probe:
            if np.any(self.labels != PROBE_LABEL):
                raise ContractError(f"{self.source}: probe labels must all be {PROBE_LABEL}")
        elif len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(
                f"{self.source}: labels must lie in [0, {self.num_classes}), "
                f"found range [{self.labels.min()}, {self.labels.max()}]"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    def subset(self, n: int) -> "LabeledDataset":
        """The first n examples (example ids are kept as positions 0..n-1)."""
        if n < 1:
            raise ParameterError(f"subset size must be >= 1, got {n}")
        n = min(n, len(self))
        return replace(
            self,
            images=Tensor(self.images.data[:n]),
            labels=self.labels[:n],
            source=f"{self.source}[:{n}]",
            metadata=dict(self.metadata),
        )


# ── Readers ──────────────────────────────────────────────────────────


def _read_payload(path: str | Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, FETCH_HINT)
    payload = path.read_bytes()
    if payload[:2] == GZIP_MAGIC:
        try:
            payload = gzip.decompress(payload)
        except (OSError, EOFError, zlib.error) as exc:
            raise FormatError(f"{path}: corrupt gzip stream ({exc})") from exc
    return payload


def _parse_idx(payload: bytes, expected_magic: bytes, source: str) -> np.ndarray:
    if len(payload) < 4:
        raise TruncatedFileError(f"{source}: file too short for an IDX header", offset=len(payload))
    found = payload[:4]
    if found != expected_magic:
        raise FormatError(
            f"{source}: expected IDX magic {expected_magic.hex(' ')}, found {found.hex(' ')}",
            offset=0,
        )
    ndim = found[3]
    header_end = 4 + 4 * ndim
    if len(payload) < header_end:
        raise TruncatedFileError(f"{source}: IDX header needs {header_end} bytes", offset=len(payload))
    dims = struct.unpack(f">{ndim}I", payload[4:header_end])
    expected = int(np.prod(dims, dtype=np.int64))
    found_length = len(payload) - header_end
    if found_length < expected:
        raise TruncatedFileError(
            f"{source}: header declares {expected} payload bytes, found {found_length}",
            offset=len(payload),
        )
    if found_length > expected:
        raise FormatError(
            f"{source}: header declares {expected} payload bytes, found {found_length}",
            offset=header_end + expected,
        )
    return np.frombuffer(payload, dtype=np.uint8, offset=header_end).reshape(dims)


def load_mnist_idx(
    images_path: str | Path,
    labels_path: str | Path,
    split: Split = Split.TRAIN,
) -> LabeledDataset:
    """
    Read an IDX image/label pair into an n x 1 x h x w dataset of raw pixel values.

    Raises:
        FormatError: wrong magic (expected vs found) or mismatched counts.
        TruncatedFileError: a file ends before its header says it should.
    """
    images = _parse_idx(_read_payload(images_path), IDX_IMAGES_MAGIC, str(images_path))
    labels = _parse_idx(_read_payload(labels_path), IDX_LABELS_MAGIC, str(labels_path))
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path}: {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    logger.debug("parsed %d IDX images from %s", images.shape[0], images_path)
    return LabeledDataset(
        images=Tensor(images[:, None, :, :].astype(default_dtype())),
        labels=labels.astype(np.int64),
        num_classes=10,
        split=split,
        source=f"mnist-idx:{Path(images_path).name}",
    )


def load_cifar_binary(
    paths: Sequence[str | Path],
    variant: DatasetKind,
    split: Split = Split.TRAIN,
) -> LabeledDataset:
    """
    Read CIFAR binary batch files into an n x 3 x 32 x 32 dataset of raw pixels.

    CIFAR-100 records carry (coarse, fine) labels; the fine label is returned.
    """
    if variant is DatasetKind.MNIST:
        raise ParameterError("load_cifar_binary reads cifar10 or cifar100, not mnist")
    label_bytes = 1 if variant is DatasetKind.CIFAR10 else 2
    record_size = label_bytes + CIFAR_PIXELS

    image_parts, label_parts = [], []
    for path in paths:
        payload = _read_payload(path)
        remainder = len(payload) % record_size
        if remainder:
            raise FormatError(
                f"{path}: length {len(payload)} is not a multiple of the {record_size}-byte "
                f"{variant.value} record",
                offset=len(payload) - remainder,
            )
        records = np.frombuffer(payload, dtype=np.uint8).reshape(-1, record_size)
        label_parts.append(records[:, label_bytes - 1].astype(np.int64))
        image_parts.append(records[:, label_bytes:].reshape(-1, 3, 32, 32))
        logger.debug("parsed %d %s records from %s", len(records), variant.value, path)

    images = np.concatenate(image_parts) if image_parts else np.zeros((0, 3, 32, 32), np.uint8)
    labels = np.concatenate(label_parts) if label_parts else np.zeros(0, np.int64)
    return LabeledDataset(
        images=Tensor(images.astype(default_dtype())),
        labels=labels,
        num_classes=variant.num_classes,
        split=split,
        source=f"{variant.value}-binary:{','.join(Path(p).name for p in paths)}",
    )


def _resolve(path: Path) -> Path:
    if path.exists():
        return path
    compressed = path.with_name(path.name + ".gz")
    if compressed.exists():
        return compressed
    raise MissingArtifactError(path, FETCH_HINT)


def dataset_files(kind: DatasetKind, data_dir: str | Path, split: Split) -> list[Path]:
    """Standard file locations under the data directory."""
    data_dir = Path(data_dir)
    train = split is Split.TRAIN
    if kind is DatasetKind.MNIST:
        prefix = "train" if train else "t10k"
        root = data_dir / "mnist"
        return [
            _resolve(root / f"{prefix}-images-idx3-ubyte"),
            _resolve(root / f"{prefix}-labels-idx1-ubyte"),
        ]
    if kind is DatasetKind.CIFAR10:
        root = data_dir / "cifar-10-batches-bin"
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if train else ["test_batch.bin"]
        return [_resolve(root / name) for name in names]
    root = data_dir / "cifar-100-binary"
    return [_resolve(root / ("train.bin" if train else "test.bin"))]


def load_dataset(
    kind: DatasetKind,
    data_dir: str | Path,
    split: Split,
    normalization: Normalization | None = None,
    subset: int | None = None,
) -> LabeledDataset:
    """Load a standard split from disk and normalize it."""
    files = dataset_files(kind, data_dir, split)
    if kind is DatasetKind.MNIST:
        dataset = load_mnist_idx(files[0], files[1], split)
    else:
        dataset = load_cifar_binary(files, kind, split)
    if subset is not None:
        dataset = dataset.subset(subset)
    normalization = normalization or kind.normalization
    return normalize(dataset, normalization.mean, normalization.std)


# ── Normalization ────────────────────────────────────────────────────


def normalize(
    dataset: LabeledDataset, mean: Sequence[float], std: Sequence[float]
) -> LabeledDataset:
    """pixel <- (pixel/255 - mean) / std, per channel."""
    if dataset.normalization is not None:
        raise ContractError(f"{dataset.source} is already normalized")
    normalization = Normalization(mean=tuple(mean), std=tuple(std))
    if normalization.channels != dataset.image_shape[0]:
        raise ParameterError(
            f"{normalization.channels} normalization channels for {dataset.image_shape[0]}-channel images"
        )
    return replace(
        dataset,
        images=Tensor(normalization.apply(dataset.images.data)),
        normalization=normalization,
        metadata=dict(dataset.metadata),
    )


def denormalize(dataset: LabeledDataset) -> LabeledDataset:
    """Inverse of `normalize`, back to raw pixel values."""
    if dataset.normalization is None:
        raise ContractError(f"{dataset.source} is not normalized")
    return replace(
        dataset,
        images=Tensor(dataset.normalization.invert(dataset.images.data)),
        normalization=None,
        metadata=dict(dataset.metadata),
    )


# ── Synthetic data ───────────────────────────────────────────────────


def make_zeros_probe(
    n: int, shape: Sequence[int], normalization: Normalization
) -> LabeledDataset:
    """
    Pitch-black images pushed through the same normalization as real data.

    Labels are PROBE_LABEL and the dataset is flagged so accuracy ignores it.
    """
    if n < 1:
        raise ParameterError(f"probe size must be >= 1, got {n}")
    raw = LabeledDataset(
        images=Tensor(np.zeros((n, *shape), dtype=default_dtype())),
        labels=np.full(n, PROBE_LABEL, dtype=np.int64),
        num_classes=0,
        split=Split.TEST,
        source="zeros-probe",
        is_probe=True,
    )
    return normalize(raw, normalization.mean, normalization.std)


class ScalarDistribution(Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    BIMODAL = "bimodal"


def make_synthetic_scalar_dataset(
    dist: ScalarDistribution | str, n: int, seed: int
) -> np.ndarray:
    """
    n iid float64 draws, reproducible by seed.

    uniform: U(0, 1); gaussian: N(0, 1); bimodal: equal mixture of N(-2, 0.25)
    and N(2, 0.25), variances 0.25 (std 0.5).
    """
    if n < 1:
        raise ParameterError(f"sample count must be >= 1, got {n}")
    dist = ScalarDistribution(dist)
    rng = Rng(seed).child("synthetic", dist.value)
    if dist is ScalarDistribution.UNIFORM:
        return rng.uniform(0.0, 1.0, n)
    if dist is ScalarDistribution.GAUSSIAN:
        return rng.normal(0.0, 1.0, n)
    centers = np.where(rng.uniform(size=n) < 0.5, -2.0, 2.0)
    return centers + rng.normal(0.0, 0.5, n)


# ── Batching ─────────────────────────────────────────────────────────


class Batch(NamedTuple):
    indices: np.ndarray
    images: np.ndarray
    labels: np.ndarray


class BatchIterator:
    """
    Seeded mini-batch visitation of a dataset.

    Epoch e visits the permutation drawn from the (seed, "shuffle", e) stream, so
    any epoch can be replayed without replaying the ones before it.
    """

    def __init__(
        self,
        dataset: LabeledDataset,
        batch_size: int,
        seed: int = 0,
        *,
        drop_last: bool = False,
        shuffle: bool = True,
    ):
        if batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.drop_last = drop_last
        self.shuffle = shuffle

    def order(self, epoch: int = 0) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return Rng(self.seed).child("shuffle", epoch).permutation(n)

    def __len__(self) -> int:
        full, rest = divmod(len(self.dataset), self.batch_size)
        return full if self.drop_last or rest == 0 else full + 1

    def epoch(self, epoch: int = 0) -> Iterator[Batch]:
        order = self.order(epoch)
        images, labels = self.dataset.images.data, self.dataset.labels
        for start in range(0, len(order), self.batch_size):
            indices = order[start : start + self.batch_size]
            if self.drop_last and len(indices) < self.batch_size:
                return
            yield Batch(indices, images[indices], labels[indices])

    def __iter__(self) -> Iterator[Batch]:
        return self.epoch(0)
