"""Binary container for named arrays, shared by checkpoints and sample dumps.

Layout, all integers little-endian::

    b"EDGN"  u8 version  u64 count
    count x ( u64 name_len  name(utf-8)  u8 dtype  u64 rank  rank x u64 dim  raw values )

dtype codes: ``f`` float32, ``d`` float64, ``B`` uint8, ``q`` int64.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"EDGN"
VERSION = 1

_CODES = {
    np.dtype("<f4"): b"f",
    np.dtype("<f8"): b"d",
    np.dtype("u1"): b"B",
    np.dtype("<i8"): b"q",
}
_DTYPES = {v: k for k, v in _CODES.items()}


class FormatError(ValueError):
    pass


def _u64(n: int) -> bytes:
    return struct.pack("<Q", n)


def dump_arrays(arrays: dict[str, np.ndarray], fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(bytes([VERSION]))
    fh.write(_u64(len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype if arr.dtype.itemsize == 1 else arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise FormatError(f"cannot store dtype {arr.dtype} for {name!r}")
        raw = name.encode("utf-8")
        fh.write(_u64(len(raw)))
        fh.write(raw)
        fh.write(_CODES[dt])
        fh.write(_u64(arr.ndim))
        for d in arr.shape:
            fh.write(_u64(d))
        fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.data):
            raise FormatError(f"truncated file while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos:end]
        self.pos = end
        return chunk

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_arrays(data: bytes) -> dict[str, np.ndarray]:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic bytes; not an EDGN tensor file")
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (expected {VERSION})")
    out: dict[str, np.ndarray] = {}
    for _ in range(r.u64("tensor count")):
        name = r.take(r.u64("name length"), "name").decode("utf-8")
        code = r.take(1, f"dtype of {name!r}")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code!r} for {name!r}")
        dt = _DTYPES[code]
        rank = r.u64(f"rank of {name!r}")
        if rank > 16:
            raise FormatError(f"implausible rank {rank} for {name!r}")
        shape = tuple(r.u64(f"dims of {name!r}") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64))
        raw = r.take(count * dt.itemsize, f"values of {name!r}")
        out[name] = np.frombuffer(raw, dtype=dt).reshape(shape).copy()
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return out


def to_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    dump_arrays(arrays, buf)
    return buf.getvalue()


def save(path: str | os.PathLike, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically: a reader never sees a half-written file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(arrays))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return load_arrays(Path(path).read_bytes())
