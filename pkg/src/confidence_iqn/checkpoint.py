"""
Checkpoint Container

Flat little-endian binary format for named float32 tensors:

    magic      4 bytes   b"LQIQ"
    version    u32
    count      u32
    per tensor:
        name length   u16
        name          UTF-8 bytes
        rank          u8
        dims          u32 * rank
        values        f32 * prod(dims)

Model hyperparameters live next to the container in a JSON metadata file
(`<name>.json`), so a checkpoint can be rebuilt without the config that made it.
"""

import json
import logging
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CheckpointError, MissingArtifactError, TruncatedFileError

logger = logging.getLogger(__name__)

MAGIC = b"LQIQ"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sII")


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialize named arrays; values are stored as little-endian float32."""
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(tensors))]
    for name, array in tensors.items():
        raw_name = name.encode("utf-8")
        array = np.asarray(array)
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if array.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} has rank {array.ndim}, at most 255 supported")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
        parts.append(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, source: str):
        self.payload = payload
        self.offset = 0
        self.source = source

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise TruncatedFileError(
                f"{self.source}: truncated while reading {what}: need {size} bytes, "
                f"{len(self.payload) - self.offset} left",
                offset=self.offset,
            )
        chunk = self.payload[self.offset : end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(payload: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    """Parse a container produced by `encode`."""
    reader = _Reader(payload, source)
    magic, version, count = reader.unpack("<4sII", "header")
    if magic != MAGIC:
        raise CheckpointError(f"{source}: expected magic {MAGIC!r}, found {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{source}: unsupported format version {version} (expected {FORMAT_VERSION})", offset=4
        )

    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H", "name length")
        name = reader.take(name_length, "name").decode("utf-8")
        (rank,) = reader.unpack("<B", f"rank of {name!r}")
        dims = reader.unpack(f"<{rank}I", f"dims of {name!r}")
        values = int(np.prod(dims, dtype=np.int64))
        raw = reader.take(4 * values, f"values of {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    if reader.offset != len(payload):
        raise CheckpointError(f"{source}: {len(payload) - reader.offset} trailing bytes", offset=reader.offset)
    return tensors


def save_checkpoint(
    path: str | Path,
    tensors: Mapping[str, np.ndarray],
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """Write the container and, if given, its JSON metadata sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors))
    if metadata is not None:
        metadata_path(path).write_text(json.dumps(metadata, indent=2, sort_keys=True))
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path: str | Path, hint: str = "run `confidence-iqn train` first") -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, hint)
    return decode(path.read_bytes(), source=str(path))


def metadata_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def load_metadata(path: str | Path) -> dict[str, Any]:
    sidecar = metadata_path(path)
    if not sidecar.exists():
        raise MissingArtifactError(sidecar, "checkpoint metadata is written next to every checkpoint")
    return json.loads(sidecar.read_text())
