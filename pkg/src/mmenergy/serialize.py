"""Binary checkpoint container.

Layout, all integers little-endian:

    bytes 0:4    magic ``b"MMEN"``
    bytes 4:8    uint32 format version
    bytes 8:16   uint64 header length in bytes
    then         UTF-8 JSON header
    then         raw float32 tensor blobs, in header-declared order

The JSON header carries ``kind`` (what the file holds), free-form ``meta``
(config echo, vocabulary, seeds, frozen flags), and the ordered tensor
directory with names and shapes.  Every tensor is stored as contiguous
little-endian float32, so reloading is bit-exact.  Loads validate the magic,
the version, and the exact byte count; a truncated or oversized file raises
instead of partially loading.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from mmenergy.errors import CheckpointError

MAGIC = b"MMEN"
FORMAT_VERSION = 1


def save_container(
    path: str | Path,
    kind: str,
    meta: dict,
    tensors: dict[str, torch.Tensor],
) -> None:
    """Write named float32 tensors plus a JSON header to ``path``."""
    directory = []
    blobs = []
    for name, tensor in tensors.items():
        if tensor.dtype != torch.float32:
            raise CheckpointError(
                f"tensor {name!r} has dtype {tensor.dtype}, container stores float32 only"
            )
        array = tensor.detach().cpu().contiguous().numpy()
        directory.append({"name": name, "shape": list(array.shape)})
        blobs.append(array.astype("<f4", copy=False).tobytes())

    header = json.dumps(
        {"kind": kind, "meta": meta, "tensors": directory},
        sort_keys=True,
    ).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_container(
    path: str | Path,
    expect_kind: str | None = None,
) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read a container back as ``(meta, tensors)``.  Fails loudly on damage."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if len(data) < 16:
        raise CheckpointError(f"{path}: too short to be a checkpoint")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes, not a checkpoint file")
    (version,) = struct.unpack("<I", data[4:8])
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} unsupported (expected {FORMAT_VERSION})"
        )
    (header_len,) = struct.unpack("<Q", data[8:16])
    if 16 + header_len > len(data):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    for key in ("kind", "meta", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: header missing {key!r}")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise CheckpointError(
            f"{path}: holds {header['kind']!r}, expected {expect_kind!r}"
        )

    tensors: dict[str, torch.Tensor] = {}
    offset = 16 + header_len
    for entry in header["tensors"]:
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        blob = data[offset : offset + nbytes]
        if len(blob) < nbytes:
            raise CheckpointError(f"{path}: truncated blob for tensor {entry['name']!r}")
        array = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
        tensors[entry["name"]] = torch.from_numpy(array)
        offset += nbytes
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")

    return header["meta"], tensors
