"""
Tests for the LQIQ checkpoint container.
"""

import struct

import numpy as np
import pytest

from confidence_iqn.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    decode,
    encode,
    load_checkpoint,
    load_metadata,
    metadata_path,
    save_checkpoint,
)
from confidence_iqn.errors import CheckpointError, MissingArtifactError, TruncatedFileError


@pytest.fixture
def tensors():
    return {
        "backbone.conv1.weight": np.arange(24, dtype=np.float32).reshape(2, 1, 3, 4),
        "head.bias": np.array([0.5, -1.25], dtype=np.float32),
        "scalar": np.array(3.0, dtype=np.float32),
    }


class TestLayout:
    def test_header(self, tensors):
        payload = encode(tensors)
        magic, version, count = struct.unpack("<4sII", payload[:12])
        assert magic == MAGIC
        assert version == FORMAT_VERSION
        assert count == 3

    def test_first_entry_layout(self):
        payload = encode({"ab": np.array([[1.0, 2.0]], dtype=np.float32)})
        (name_length,) = struct.unpack("<H", payload[12:14])
        assert name_length == 2
        assert payload[14:16] == b"ab"
        assert payload[16] == 2
        assert struct.unpack("<2I", payload[17:25]) == (1, 2)
        assert struct.unpack("<2f", payload[25:33]) == (1.0, 2.0)
        assert len(payload) == 33

    def test_values_stored_as_float32(self):
        payload = encode({"x": np.array([0.1], dtype=np.float64)})
        assert decode(payload)["x"].dtype == np.float32


class TestDecode:
    def test_restores_names_shapes_values(self, tensors):
        restored = decode(encode(tensors))
        assert list(restored) == list(tensors)
        for name, array in tensors.items():
            assert restored[name].shape == array.shape
            assert np.array_equal(restored[name], array)

    def test_bad_magic(self, tensors):
        payload = b"XXXX" + encode(tensors)[4:]
        with pytest.raises(CheckpointError, match="magic"):
            decode(payload)

    def test_unsupported_version(self, tensors):
        payload = bytearray(encode(tensors))
        payload[4:8] = struct.pack("<I", 99)
        with pytest.raises(CheckpointError, match="version 99"):
            decode(bytes(payload))

    def test_truncated_values_report_offset(self, tensors):
        payload = encode(tensors)[:-3]
        with pytest.raises(TruncatedFileError, match="byte offset") as excinfo:
            decode(payload)
        assert excinfo.value.offset is not None

    def test_truncated_header(self):
        with pytest.raises(TruncatedFileError, match="header"):
            decode(b"LQ")

    def test_trailing_bytes(self, tensors):
        with pytest.raises(CheckpointError, match="trailing"):
            decode(encode(tensors) + b"\x00")


class TestFiles:
    def test_save_and_load_with_metadata(self, tmp_path, tensors):
        path = save_checkpoint(tmp_path / "runs" / "classifier.ckpt", tensors, {"kind": "classifier", "epochs": 2})
        assert path.exists()
        assert metadata_path(path).name == "classifier.json"
        assert load_metadata(path) == {"kind": "classifier", "epochs": 2}
        assert np.array_equal(load_checkpoint(path)["head.bias"], tensors["head.bias"])

    def test_missing_checkpoint_has_hint(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="run `confidence-iqn train` first"):
            load_checkpoint(tmp_path / "iqn.ckpt")

    def test_missing_metadata(self, tmp_path, tensors):
        path = save_checkpoint(tmp_path / "iqn.ckpt", tensors)
        with pytest.raises(MissingArtifactError, match="iqn.json"):
            load_metadata(path)

    def test_missing_artifact_is_file_not_found(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "nope.ckpt", hint="retrain")
