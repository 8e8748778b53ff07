"""Binary checkpoint format.

Layout (all integers little-endian u32)::

    b"MALPCKPT" | version | entry count
    per entry: name length | UTF-8 name | rank | extents... | float32 LE payload
"""

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"MALPCKPT"
VERSION = 1


def save(path, arrays):
    """Write an ordered name -> array mapping (or a ParameterStore)."""
    if hasattr(arrays, "state"):
        arrays = arrays.state()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def load(path):
    """Read a checkpoint into an OrderedDict of float32 arrays."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at byte 0")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    version, count = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = take("<I")
        if pos + nlen > len(buf):
            raise CheckpointError(f"{path}: truncated name at byte {pos}")
        name = buf[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError(f"{path}: truncated payload for {name!r} at byte {pos}")
        out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    return out
