"""Raw tensor files: magic ``EPSG``, u32 rank, u32 dims, float32 payload.

All integers and floats are little-endian.  The header is zero-padded to a
multiple of 16 bytes, so ranks 0-2 use exactly 16 bytes and ranks 3-6 use 32.
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"EPSG"


def _header_size(rank):
    raw = 8 + 4 * rank
    return -(-raw // 16) * 16


def to_bytes(array):
    a = np.ascontiguousarray(array, dtype="<f4")
    if not np.all(np.isfinite(a)):
        raise ValueError("refusing to serialise non-finite values")
    head = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    head += b"\0" * (_header_size(a.ndim) - len(head))
    return head + a.tobytes()


def from_bytes(buf):
    if buf[:4] != MAGIC:
        raise ValueError("not an EPSG tensor file (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    if rank > 6:
        raise ValueError(f"unsupported tensor rank {rank}")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    off = _header_size(rank)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 4 * count:
        raise ValueError("tensor file truncated or oversized")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def save_tensor(path, array):
    Path(path).write_bytes(to_bytes(array))


def load_tensor(path):
    return from_bytes(Path(path).read_bytes())
