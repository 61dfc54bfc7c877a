"""Flat binary checkpoints.

Layout: the 4 magic bytes ``IAG1`` followed by one record per tensor until
end of file. A record is ``u32 name_len | name (utf-8) | u32 rank |
u32 dim * rank | f32 data`` with every integer and float little-endian.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

MAGIC = b"IAG1"


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, torch.Tensor]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> dict[str, torch.Tensor]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic; not an IAG1 checkpoint")
    out: dict[str, torch.Tensor] = {}
    pos = 4
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            out[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint at byte {pos}") from exc
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors))
    os.replace(tmp, path)
    return path


def load(path: str | os.PathLike) -> dict[str, torch.Tensor]:
    return loads(Path(path).read_bytes())
