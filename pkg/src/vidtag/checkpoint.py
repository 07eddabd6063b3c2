"""Binary tensor checkpoint ("VTCK").

Layout, all little-endian::

    b"VTCK" | version u32 | count u32
    per tensor: name_len u32 | name utf-8 | rank u32 | dims u32 * rank | float32 * prod(dims)

Tensors are written in sorted name order so equal states give equal bytes.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"VTCK"
VERSION = 1


def encode_tensors(tensors):
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_tensors(buf, path=None):
    mv = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(mv):
            raise FormatError(f"truncated checkpoint while reading {what}", path, pos)
        chunk = mv[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError("bad checkpoint magic, expected VTCK", path, 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", path, 4)
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4, "name length"))
        try:
            name = bytes(take(n, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid utf-8", path, pos - n) from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size, f"values of {name}"), dtype="<f4")
        tensors[name] = data.reshape(dims).astype(np.float32)
    if pos != len(mv):
        raise FormatError("trailing bytes after last tensor", path, pos)
    return tensors


def save_tensors(path, tensors):
    Path(path).write_bytes(encode_tensors(tensors))


def load_tensors(path):
    path = Path(path)
    return decode_tensors(path.read_bytes(), path)
