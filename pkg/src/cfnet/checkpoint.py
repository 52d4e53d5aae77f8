"""Single-file tensor container.

Layout (all integers little-endian): magic ``CFN1``, u32 version, u32 entry
count; then per entry u32 name length, UTF-8 name, u8 dtype code (0 = f32,
1 = f64), u8 rank, rank x u32 dims, and the raw little-endian scalars in
row-major order.  A save -> load round trip is bitwise exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"CFN1"
VERSION = 1

_DTYPE_FOR_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def checkpoint_bytes(entries):
    """Serialize ordered ``(name, tensor)`` pairs; names must be unique."""
    seen = set()
    out = bytearray()
    out += MAGIC
    out += struct.pack("<II", VERSION, len(entries))
    for name, tensor in entries:
        if name in seen:
            raise ValueError(f"duplicate entry name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(tensor)
        if arr.dtype not in _CODE_FOR_DTYPE:
            raise ValueError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        if not 1 <= arr.ndim <= 4:
            raise ValueError(f"entry {name!r} has rank {arr.ndim}, expected 1..4")
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<BB", _CODE_FOR_DTYPE[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
    return bytes(out)


class _Cursor:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, count):
        if self.pos + count > len(self.data):
            raise ValueError(
                f"truncated payload: needed {count} bytes at byte {self.pos}, "
                f"stream has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + count]
        self.pos += count
        return chunk


def parse_checkpoint(data):
    """Parse container bytes back into the ordered ``(name, tensor)`` list."""
    cur = _Cursor(data)
    if cur.take(4) != MAGIC:
        raise ValueError("bad magic: not a checkpoint container")
    version, count = struct.unpack("<II", cur.take(8))
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    entries = []
    seen = set()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", cur.take(4))
        name = cur.take(name_len).decode("utf-8")
        if name in seen:
            raise ValueError(f"duplicate entry name {name!r}")
        seen.add(name)
        code, rank = struct.unpack("<BB", cur.take(2))
        if code not in _DTYPE_FOR_CODE:
            raise ValueError(f"unknown dtype code {code} for entry {name!r}")
        if not 1 <= rank <= 4:
            raise ValueError(f"entry {name!r} has rank {rank}, expected 1..4")
        shape = struct.unpack(f"<{rank}I", cur.take(4 * rank))
        dtype = _DTYPE_FOR_CODE[code]
        payload = cur.take(int(np.prod(shape)) * dtype.itemsize)
        arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
        entries.append((name, arr.astype(arr.dtype.newbyteorder("="), copy=True)))
    return entries


def save_checkpoint(path, entries):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(entries))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
