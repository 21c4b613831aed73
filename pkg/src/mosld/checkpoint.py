"""Binary checkpoint container for named float64 tensors.

Layout (all integers little-endian uint64):

    magic   6 bytes  b"MOSLD1"
    count   u64      number of records
    record  repeated:
        name_len  u64
        name      UTF-8 bytes
        rank      u64
        dims      rank * u64
        payload   prod(dims) * f64 little-endian, C order

Round-trips are bit-exact: the payload is the raw IEEE-754 buffer.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError, require

MAGIC = b"MOSLD1"

_U64 = struct.Struct("<Q")


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write a name -> array mapping. Arrays are stored as float64."""
    path = Path(path)
    chunks = [MAGIC, _U64.pack(len(tensors))]
    for name, value in tensors.items():
        require(isinstance(name, str) and name, DataError,
                "tensor names must be non-empty strings")
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(_U64.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U64.pack(arr.ndim))
        for dim in arr.shape:
            chunks.append(_U64.pack(dim))
        chunks.append(arr.tobytes(order="C"))
    path.write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        end = self.pos + n
        require(end <= len(self.blob), DataError,
                "checkpoint truncated: record extends past end of file")
        out = self.blob[self.pos:end]
        self.pos = end
        return out

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container written by save_tensors. Bit-exact inverse."""
    path = Path(path)
    blob = path.read_bytes()
    rd = _Reader(blob)
    require(rd.take(len(MAGIC)) == MAGIC, DataError,
            f"not a checkpoint file: bad magic in {path}")
    count = rd.u64()
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = rd.u64()
        require(name_len <= 65536, DataError,
                "checkpoint corrupt: unreasonable name length")
        name = rd.take(name_len).decode("utf-8")
        require(name not in out, DataError,
                f"checkpoint corrupt: duplicate tensor name {name!r}")
        rank = rd.u64()
        require(rank <= 32, DataError,
                "checkpoint corrupt: unreasonable tensor rank")
        shape = tuple(rd.u64() for _ in range(rank))
        n_items = 1
        for dim in shape:
            n_items *= dim
        require(n_items <= 1 << 40, DataError,
                "checkpoint corrupt: unreasonable tensor size")
        payload = rd.take(n_items * 8)
        out[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    require(rd.pos == len(blob), DataError,
            "checkpoint corrupt: trailing bytes after last record")
    return out
