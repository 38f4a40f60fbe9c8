"""Little-endian single-file container shared by checkpoints and datasets.

Layout::

    magic      4 bytes ("DYNF" checkpoints, "DYND" datasets)
    version    u32
    header     u64 length + UTF-8 JSON
    n_tensors  u32
    tensors    repeated: u32 name length, name bytes, u32 rank,
               u64 extents[rank], f64 payload (row-major)
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Corrupt file, wrong magic or unsupported version."""


def write_container(path, magic: bytes, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write atomically: the file appears complete or not at all."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    blob = json.dumps(header, sort_keys=True).encode()
    parts = [magic, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(blob)), blob]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(b"".join(parts))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated file")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    got = take(4)
    if got != magic:
        raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<Q", take(8))
    try:
        header = json.loads(take(hlen).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode()
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = arr
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes")
    return header, tensors
