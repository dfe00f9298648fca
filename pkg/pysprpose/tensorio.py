"""
SPMT tensor files.

    magic   b"SPMT"
    u32     version (1)
    u32     rank
    u32     dims[rank]
    u8      dtype tag (1 = float32)
    bytes   payload, row-major, little-endian
    u32     CRC-32 of the payload

All integers are little-endian.  Files are written to a temporary sibling
and renamed into place.
"""
from __future__ import annotations

import logging
import os
import struct
import tempfile
import zlib

import numpy as np

from .errors import StorageError, TensorFormatError

logger = logging.getLogger(__name__)

MAGIC = b"SPMT"
VERSION = 1
DTYPE_FLOAT32 = 1
_DTYPES = {DTYPE_FLOAT32: np.dtype("<f4")}


def pack_tensor(array):
    """Serialize an array as float32 SPMT bytes."""
    arr = np.ascontiguousarray(np.asarray(array), dtype=_DTYPES[DTYPE_FLOAT32])
    payload = arr.tobytes()
    head = MAGIC + struct.pack("<II", VERSION, arr.ndim) + struct.pack("<{0}I".format(arr.ndim), *arr.shape)
    return head + struct.pack("<B", DTYPE_FLOAT32) + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def _need(data, offset, size, what):
    if offset + size > len(data):
        raise TensorFormatError("Truncated tensor: missing {0}".format(what))


def unpack_tensor(data, offset=0):
    """
    Parse one SPMT record starting at offset.
    :return: (read-only float32 array, offset just past the record)
    """
    _need(data, offset, 12, "header")
    if data[offset:offset + 4] != MAGIC:
        raise TensorFormatError("Bad magic {0!r}, expected {1!r}".format(bytes(data[offset:offset + 4]), MAGIC))
    version, rank = struct.unpack_from("<II", data, offset + 4)
    if version != VERSION:
        raise TensorFormatError("Unsupported tensor version {0}".format(version))
    pos = offset + 12
    _need(data, pos, 4 * rank + 1, "dimensions")
    dims = struct.unpack_from("<{0}I".format(rank), data, pos)
    pos += 4 * rank
    tag = data[pos]
    pos += 1
    if tag not in _DTYPES:
        raise TensorFormatError("Unknown dtype tag {0}".format(tag))
    dtype = _DTYPES[tag]
    size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    _need(data, pos, size + 4, "payload")
    payload = bytes(data[pos:pos + size])
    (crc,) = struct.unpack_from("<I", data, pos + size)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise TensorFormatError("CRC mismatch: payload is corrupt")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return arr, pos + size + 4


def atomic_write_bytes(path, data):
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise StorageError("Cannot write {0}: {1}".format(path, e))


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_tensor(path, array):
    atomic_write_bytes(path, pack_tensor(array))
    logger.debug("Wrote tensor %s shape %s", path, np.shape(array))


def read_tensor(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as e:
        raise StorageError("Cannot read {0}: {1}".format(path, e))
    try:
        arr, end = unpack_tensor(data)
    except TensorFormatError as e:
        raise TensorFormatError("{0}: {1}".format(path, e))
    if end != len(data):
        raise TensorFormatError("{0}: trailing bytes after tensor".format(path))
    return arr
