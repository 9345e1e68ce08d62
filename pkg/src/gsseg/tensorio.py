"""Raw tensor file format used for masks, guidance features and scores.

Layout (all little-endian):

    magic   5 bytes  b"GSTEN"
    version u8       currently 1
    dtype   u8       0 = uint8, 1 = float32
    ndim    u8
    dims    ndim x u32
    payload row-major array data
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"GSTEN"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<f4")}
_CODE_FOR_KIND = {"u": 0, "b": 0, "f": 1}


def write_tensor(path, array: np.ndarray) -> None:
    """Write `array` to `path`; bool/uint8 map to u8, floats to f32."""
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def encode_tensor(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _CODE_FOR_KIND.get(array.dtype.kind)
    if code is None:
        raise ValueError(f"unsupported dtype {array.dtype} for GSTEN tensor")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<BBB", VERSION, code, array.ndim))
    out.write(struct.pack(f"<{array.ndim}I", *array.shape))
    out.write(np.ascontiguousarray(array, dtype=_DTYPE_CODES[code]).tobytes())
    return out.getvalue()


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < len(MAGIC) + 3:
        raise FormatError("GSTEN blob truncated before header")
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError("bad magic, not a GSTEN tensor")
    version, code, ndim = struct.unpack_from("<BBB", blob, len(MAGIC))
    if version != VERSION:
        raise FormatError(f"unknown GSTEN version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown GSTEN dtype code {code}")
    offset = len(MAGIC) + 3
    if len(blob) < offset + 4 * ndim:
        raise FormatError("GSTEN blob truncated in dims")
    dims = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = blob[offset:]
    if len(payload) != expected:
        raise FormatError(
            f"GSTEN payload is {len(payload)} bytes, dims {dims} need {expected}"
        )
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
