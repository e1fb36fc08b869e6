"""Binary container of named float32 tensors.

Layout (all integers little-endian u32)::

    b"SVDF" | version | tensor_count
    repeated tensor_count times:
        name_len | name (UTF-8) | rank | dim_0 .. dim_{rank-1} | float32 LE data (C order)

Tensors are written in the order given, so identical dicts give identical bytes.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"SVDF"
VERSION = 1


def dumps(tensors):
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(data, source="<bytes>"):
    if len(data) < 12 or data[:4] != MAGIC:
        raise DataError(f"{source}: bad checkpoint magic {bytes(data[:4])!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    off = 12
    tensors = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            name = bytes(data[off:off + n]).decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if off + 4 * size > len(data):
                raise DataError(f"{source}: tensor {name!r} truncated")
            tensors[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float32)
            off += 4 * size
    except (struct.error, UnicodeDecodeError) as e:
        raise DataError(f"{source}: corrupt checkpoint ({e})") from e
    if off != len(data):
        raise DataError(f"{source}: {len(data) - off} trailing bytes")
    return tensors


def save(path, tensors):
    Path(path).write_bytes(dumps(tensors))


def load(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    return loads(data, str(path))
