"""The BJT1 tensor container.

Layout: ``b"BJT1"``, one dtype byte (1 = f64, 2 = f32, 3 = u8), one rank
byte ``r``, ``r`` little-endian uint64 extents, then the row-major
little-endian payload.
"""
import os
import struct

import numpy as np

from .errors import FormatError

MAGIC = b"BJT1"
_CODES = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("u1")}
_DTYPES = {np.dtype("float64"): 1, np.dtype("float32"): 2, np.dtype("uint8"): 3}


def encode_bjt(array):
    arr = np.asarray(array)
    code = _DTYPES.get(arr.dtype)
    if code is None:
        raise FormatError(f"dtype {arr.dtype} cannot be stored in BJT1")
    if arr.ndim > 255:
        raise FormatError("rank above 255")
    head = MAGIC + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode_bjt(buf):
    if len(buf) < 6:
        raise FormatError("truncated BJT1 header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", offset=0)
    code, rank = buf[4], buf[5]
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", offset=4)
    end = 6 + 8 * rank
    if len(buf) < end:
        raise FormatError("truncated extents", offset=len(buf))
    shape = struct.unpack(f"<{rank}Q", buf[6:end])
    dtype = _CODES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(buf) - end != need:
        raise FormatError(f"payload has {len(buf) - end} bytes, expected {need}",
                          offset=min(len(buf), end + need))
    arr = np.frombuffer(buf, dtype=dtype, offset=end).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save_bjt(path, array):
    with open(path, "wb") as fh:
        fh.write(encode_bjt(array))


def load_bjt(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        return decode_bjt(fh.read())
