"""Binary tensor container: a JSON metadata block followed by raw float32 records.

Layout (all integers little-endian)::

    b"MRMCKPT1"
    u64 metadata length, metadata (UTF-8 JSON)
    u32 tensor count
    per tensor: u32 name length, name (UTF-8), u32 ndim, ndim x u64 dims,
                prod(dims) x float32
"""

from __future__ import annotations

import json
import os
import struct
from typing import Mapping

import numpy as np
import torch

MAGIC = b"MRMCKPT1"


class CheckpointError(ValueError):
    pass


def write_container(path: str | os.PathLike, metadata: dict, tensors: Mapping[str, torch.Tensor]) -> None:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            arr = t.detach().cpu().numpy().astype("<f4", copy=False)
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    try:
        pos = 8
        (n_meta,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        metadata = json.loads(data[pos:pos + n_meta].decode("utf-8"))
        pos += n_meta
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        tensors = {}
        for _ in range(count):
            (n_name,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n_name].decode("utf-8")
            pos += n_name
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * n > len(data):
                raise CheckpointError(f"{path}: truncated tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
            tensors[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt container ({exc})") from exc
    return metadata, tensors
