import struct

import pytest
import torch

from mmenergy.errors import CheckpointError
from mmenergy.serialize import FORMAT_VERSION, MAGIC, load_container, save_container


def _sample_tensors():
    gen = torch.Generator().manual_seed(9)
    return {
        "weights": torch.randn((4, 3, 2), generator=gen),
        "bias": torch.randn((7,), generator=gen),
        "scalar": torch.tensor(3.25),
    }


def test_roundtrip_bit_exact(tmp_path):
    path = tmp_path / "box.ckpt"
    tensors = _sample_tensors()
    meta = {"note": "hello", "nested": {"k": [1, 2, 3]}}
    save_container(path, "towers", meta, tensors)
    got_meta, got = load_container(path, expect_kind="towers")
    assert got_meta == meta
    assert list(got) == list(tensors)  # declared order preserved
    for name in tensors:
        assert torch.equal(got[name], tensors[name])
        assert got[name].dtype == torch.float32


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "box.ckpt"
    save_container(path, "towers", {}, _sample_tensors())
    data = bytearray(path.read_bytes())
    data[:4] = b"NOPE"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_container(path)


def test_unsupported_version_rejected(tmp_path):
    path = tmp_path / "box.ckpt"
    save_container(path, "towers", {}, _sample_tensors())
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_container(path)


def test_truncation_rejected(tmp_path):
    path = tmp_path / "box.ckpt"
    save_container(path, "towers", {}, _sample_tensors())
    data = path.read_bytes()
    path.write_bytes(data[:-5])
    with pytest.raises(CheckpointError, match="truncated"):
        load_container(path)


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "box.ckpt"
    save_container(path, "towers", {}, _sample_tensors())
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(CheckpointError, match="trailing"):
        load_container(path)


def test_wrong_kind_rejected(tmp_path):
    path = tmp_path / "box.ckpt"
    save_container(path, "towers", {}, _sample_tensors())
    with pytest.raises(CheckpointError, match="expected"):
        load_container(path, expect_kind="train_state")


def test_non_float32_rejected(tmp_path):
    with pytest.raises(CheckpointError, match="float32"):
        save_container(tmp_path / "x.ckpt", "towers", {}, {"t": torch.zeros(2, dtype=torch.float64)})


def test_empty_file_rejected(tmp_path):
    path = tmp_path / "empty.ckpt"
    path.write_bytes(b"")
    with pytest.raises(CheckpointError):
        load_container(path)


def test_missing_file_rejected(tmp_path):
    with pytest.raises(CheckpointError):
        load_container(tmp_path / "nope.ckpt")
