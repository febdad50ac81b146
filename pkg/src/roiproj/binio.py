"""Versioned binary container for named, shape-tagged float arrays.

Layout (all integers little-endian, no padding):

    offset  size  field
    0       8     magic: b"RPJBIN01" (format version is part of the magic)
    8       4     uint32 entry count
    then per entry:
            2     uint16 name length in bytes
            var   name, UTF-8
            1     uint8 dtype tag (0 = float32, 1 = float64)
            1     uint8 ndim
            4*n   uint32 dims, row-major
            var   raw array data, little-endian, row-major

The writer emits entries in the order of the input mapping, so the same
mapping always produces byte-identical files. Checkpoints and stored scene
images both use this container.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import IntegrityError

MAGIC = b"RPJBIN01"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_arrays(path, arrays: dict) -> None:
    """Write a name -> float array mapping; insertion order is preserved."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAGS:
                arr = arr.astype(np.float32)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def read_arrays(path) -> dict:
    """Read a container written by write_arrays; raises IntegrityError on damage."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IntegrityError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise IntegrityError(f"{path}: not a {MAGIC.decode()} container")
    (count,) = struct.unpack_from("<I", blob, 8)
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            tag, ndim = struct.unpack_from("<BB", blob, pos)
            pos += 2
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            dtype = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(blob):
                raise IntegrityError(f"{path}: truncated entry {name!r}")
            arr = np.frombuffer(blob[pos : pos + nbytes], dtype=dtype).reshape(dims)
            pos += nbytes
            out[name] = arr.copy()
    except (struct.error, KeyError, ValueError) as exc:
        raise IntegrityError(f"{path}: corrupt container ({exc})") from exc
    if pos != len(blob):
        raise IntegrityError(f"{path}: {len(blob) - pos} trailing bytes")
    return out
