"""Reader and writer for the ``TNSR`` binary tensor format.

Layout: magic ``TNSR``, u8 version (1), u8 dtype (1 = float32 LE), u8 rank,
``rank`` little-endian u32 dims, then the row-major payload.
"""
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

MAGIC = b"TNSR"
VERSION = 1
DTYPE_FLOAT32 = 1

_HEADER = struct.Struct("<4sBBB")


def encode(array):
    array = np.asarray(array)
    if array.size == 0:
        raise FormatError("TNSR cannot hold an empty tensor")
    data = np.ascontiguousarray(array, dtype="<f4")
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_FLOAT32, data.ndim)
    dims = struct.pack(f"<{data.ndim}I", *data.shape)
    return header + dims + data.tobytes()


def decode(buf):
    buf = bytes(buf)
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header: {len(buf)} bytes")
    magic, version, dtype, rank = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dtype != DTYPE_FLOAT32:
        raise FormatError(f"unsupported dtype code {dtype}")
    offset = _HEADER.size
    if len(buf) < offset + 4 * rank:
        raise FormatError("truncated dimension list")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    if any(d == 0 for d in shape):
        raise FormatError(f"zero-sized dimension in shape {shape}")
    offset += 4 * rank
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    payload = len(buf) - offset
    if payload < expected:
        raise FormatError(f"truncated payload: {payload} of {expected} bytes")
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", offset=offset)
    return data.reshape(shape).astype(np.float32)


def read_tnsr(path):
    with open(path, "rb") as f:
        return decode(f.read())


def atomic_write_bytes(path, payload):
    """Write ``payload`` to a sibling temp file, then rename over ``path``."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tnsr(path, array):
    atomic_write_bytes(path, encode(array))
