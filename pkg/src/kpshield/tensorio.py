"""KPT1 tensor container.

Layout (little-endian)::

    b"KPT1" | u8 dtype (0 = f32) | u8 ndim | ndim x u32 dims | f32 payload (row-major)
"""
import struct

import numpy as np

from .errors import BadMagic, DataError, IoFailure, TruncatedFile

MAGIC = b"KPT1"
DTYPE_F32 = 0


def encode_tensor(array):
    arr = np.asarray(array)
    if arr.ndim > 255:
        raise ValueError("too many dimensions for KPT1")
    header = MAGIC + struct.pack("<BB", DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_tensor(buf, offset=0, path=None):
    """Decode one tensor starting at ``offset``; returns ``(array, next_offset)``."""
    if len(buf) - offset < 6:
        raise TruncatedFile("tensor header truncated", path, offset)
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise BadMagic("expected KPT1 magic", path, offset)
    dtype, ndim = struct.unpack_from("<BB", buf, offset + 4)
    if dtype != DTYPE_F32:
        raise DataError(f"unsupported dtype tag {dtype}", path, offset + 4)
    pos = offset + 6
    if len(buf) - pos < 4 * ndim:
        raise TruncatedFile("tensor dims truncated", path, pos)
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    nbytes = 4 * int(np.prod(shape, dtype=np.int64))
    if len(buf) - pos < nbytes:
        raise TruncatedFile(f"payload needs {nbytes} bytes, {len(buf) - pos} left", path, pos)
    arr = np.frombuffer(bytes(buf[pos:pos + nbytes]), dtype="<f4").reshape(shape)
    return arr.astype(np.float32), pos + nbytes


def save_tensor(array, path):
    try:
        with open(path, "wb") as fh:
            fh.write(encode_tensor(array))
    except OSError as exc:
        raise IoFailure(str(exc), path) from exc


def load_tensor(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoFailure(str(exc), path) from exc
    arr, end = decode_tensor(buf, 0, path)
    if end != len(buf):
        raise DataError(f"{len(buf) - end} trailing bytes", path, end)
    return arr
