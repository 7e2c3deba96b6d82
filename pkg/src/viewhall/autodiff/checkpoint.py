"""Binary checkpoint format shared by every trained artifact.

Layout (little-endian): magic ``ADLA``, version u16, record count u32, then
that many records ``name_len u16 | name utf-8 | rank u8 | dims u32*rank |
payload f32*prod(dims)`` and nothing after them.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ADLA"
VERSION = 1


class FormatError(ValueError):
    """Raised for bad magic, unsupported version or truncated payloads."""


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(getattr(arr, "data", arr))
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"parameter name too long: {name[:40]}...")
        if arr.ndim > 255:
            raise ValueError(f"rank {arr.ndim} too large for {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(blob) < 10:
        raise FormatError("truncated checkpoint header")
    (count,) = struct.unpack_from("<I", blob, 6)
    pos = 10
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"truncated checkpoint at byte {pos}")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        payload = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32)
        out[name] = payload.reshape(dims)
    if pos != len(blob):
        raise FormatError(f"{len(blob) - pos} trailing bytes after {count} records")
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
