"""Binary checkpoint format for named tensors.

Layout (all integers little-endian)::

    b"MOKA1"                      magic, 5 bytes
    u8   endianness               1 = little-endian (the only value written)
    u8   precision bits           32 or 64
    u32  tensor count
    per tensor:
        u32  name length, then UTF-8 name bytes
        u32  rank, then rank x u64 dims
        raw row-major values at the file precision
    u64  checksum                 blake2b-64 of every preceding byte

The checksum is verified before any tensor is materialised, so a damaged
file never yields a partial load.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import CorruptCheckpoint

MAGIC = b"MOKA1"
LITTLE = 1
_DTYPES = {32: np.dtype("<f4"), 64: np.dtype("<f8")}


def checksum(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def _precision_of(tensors: Mapping[str, np.ndarray]) -> int:
    kinds = {np.asarray(t).dtype for t in tensors.values()}
    return 32 if kinds and kinds <= {np.dtype(np.float32)} else 64


def dumps(tensors: Mapping[str, np.ndarray], precision: int | None = None) -> bytes:
    bits = precision or _precision_of(tensors)
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    dt = _DTYPES[bits]
    parts = [MAGIC, struct.pack("<BBI", LITTLE, bits, len(tensors))]
    for name, value in tensors.items():
        arr = np.array(value, dtype=dt, order="C")  # keeps 0-d shape, unlike ascontiguousarray
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum(body))


def loads(data: bytes) -> dict[str, np.ndarray]:
    header = len(MAGIC) + 6
    if len(data) < header + 8:
        raise CorruptCheckpoint(f"checkpoint too short ({len(data)} bytes)")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if checksum(body) != stored:
        raise CorruptCheckpoint("checksum mismatch")
    if body[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpoint("bad magic")
    endian, bits, count = struct.unpack_from("<BBI", body, len(MAGIC))
    if endian != LITTLE:
        raise CorruptCheckpoint(f"unsupported endianness flag {endian}")
    if bits not in _DTYPES:
        raise CorruptCheckpoint(f"unsupported precision tag {bits}")
    dt = _DTYPES[bits]
    pos = header
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(body):
                raise CorruptCheckpoint(f"tensor {name!r} overruns file")
            arr = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed checkpoint: {exc}") from None
    if pos != len(body):
        raise CorruptCheckpoint(f"{len(body) - pos} trailing bytes after last tensor")
    return out


def save_checkpoint(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
                    precision: int | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors, precision))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
