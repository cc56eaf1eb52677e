"""Little-endian binary container used for datasets and model checkpoints.

Layout::

    magic      8 bytes
    version    u32
    header_len u32
    header     UTF-8 JSON (metadata + array table)
    payload    contiguous arrays in table order, little-endian

The array table lists ``name``, ``dtype``, ``shape`` and ``nbytes`` for each
array. Arrays are written in C order with no padding, so a save/load cycle
is bit-exact.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimensionMismatchError,
    TruncatedPayloadError,
    VersionMismatchError,
)

FORMAT_VERSION = 1

DATASET_MAGIC = b"PABSDATA"
CHECKPOINT_MAGIC = b"PABSCKPT"
ONEHOT_MAGIC = b"PABSONEH"

_DTYPES = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "i4": np.dtype("<i4"),
    "i8": np.dtype("<i8"),
    "u1": np.dtype("u1"),
}


def _dtype_code(arr):
    for code, dt in _DTYPES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            return code
    raise TypeError(f"unsupported dtype {arr.dtype}")


def encode(magic, meta, arrays):
    """Serialize ``meta`` (JSON-able dict) and named arrays to bytes."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    table = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({"name": name, "dtype": code, "shape": list(arr.shape), "nbytes": len(data)})
        blobs.append(data)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True, allow_nan=True).encode()
    out = [magic, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    out.extend(blobs)
    return b"".join(out)


def decode(buf, magic):
    """Inverse of :func:`encode`. Returns ``(meta, arrays)``."""
    if len(buf) < 16 or buf[:8] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {bytes(buf[:8])!r}")
    version, header_len = struct.unpack("<II", buf[8:16])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, reader supports {FORMAT_VERSION}")
    end = 16 + header_len
    if len(buf) < end:
        raise TruncatedPayloadError("header shorter than declared length")
    header = json.loads(buf[16:end].decode())
    arrays = {}
    offset = end
    for entry in header["arrays"]:
        dt = _DTYPES[entry["dtype"]]
        shape = tuple(entry["shape"])
        nbytes = entry["nbytes"]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != expected:
            raise DimensionMismatchError(
                f"array {entry['name']!r}: {nbytes} bytes declared, shape {shape} needs {expected}"
            )
        if offset + nbytes > len(buf):
            raise TruncatedPayloadError(
                f"array {entry['name']!r} needs {nbytes} bytes at offset {offset}, "
                f"file has {len(buf)}"
            )
        arrays[entry["name"]] = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(buf):
        raise DimensionMismatchError(f"{len(buf) - offset} trailing bytes after payload")
    return header["meta"], arrays


def write(path, magic, meta, arrays):
    data = encode(magic, meta, arrays)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read(path, magic):
    return decode(Path(path).read_bytes(), magic)
