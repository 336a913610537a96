"""HTX1 tensor files.

Layout: magic ``b"HTX1"``, one unsigned byte rank, ``rank`` little-endian
uint32 extents, then float32 little-endian values in row-major order.
"""
import struct
from pathlib import Path

import numpy as np

MAGIC = b"HTX1"


class FormatError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.asarray(getattr(array, "data", array))
    if arr.ndim > 255:
        raise FormatError("rank too large")
    head = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 5 or buf[:4] != MAGIC:
        raise FormatError("not an HTX1 file (bad magic)")
    rank = buf[4]
    off = 5 + 4 * rank
    if len(buf) < off:
        raise FormatError("truncated header")
    shape = struct.unpack(f"<{rank}I", buf[5:off])
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"payload holds {(len(buf) - off) // 4} values, header promises {count}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def save(path, array):
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
