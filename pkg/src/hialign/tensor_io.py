"""HFAT, the on-disk tensor format.

Layout: magic bytes ``HFAT``, u8 version (=1), u8 dtype code (0 = float32,
1 = float64), u32 rank, rank x u64 extents, then the row-major payload.
All integers and the payload are little-endian.  Used for checkpoints,
prototype matrices, and synthetic feature files.
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .exceptions import DataError

MAGIC = b"HFAT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def dump_tensor(arr, fh):
    """Write one array to a binary file object."""
    arr = np.asarray(arr)
    # ascontiguousarray would promote rank 0 to rank 1
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        raise DataError(f"HFAT stores float32/float64 only, got {arr.dtype}")
    fh.write(MAGIC)
    fh.write(struct.pack("<BB", VERSION, _CODES[arr.dtype]))
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_tensor(fh):
    """Read one array; raises DataError on any malformed header or short payload."""
    head = fh.read(4)
    if head != MAGIC:
        raise DataError(f"bad HFAT magic: {head!r}")
    vb = fh.read(2)
    if len(vb) != 2:
        raise DataError("truncated HFAT header")
    version, code = struct.unpack("<BB", vb)
    if version != VERSION:
        raise DataError(f"unsupported HFAT version {version}")
    if code not in _DTYPES:
        raise DataError(f"unknown HFAT dtype code {code}")
    rb = fh.read(4)
    if len(rb) != 4:
        raise DataError("truncated HFAT header")
    (rank,) = struct.unpack("<I", rb)
    if rank > 64:
        raise DataError(f"implausible HFAT rank {rank}")
    eb = fh.read(8 * rank)
    if len(eb) != 8 * rank:
        raise DataError("truncated HFAT extents")
    shape = struct.unpack(f"<{rank}Q", eb) if rank else ()
    dtype = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    payload = fh.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise DataError("truncated HFAT payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(arr.dtype.newbyteorder("="))


def save_tensor(path, arr):
    with open(path, "wb") as fh:
        dump_tensor(arr, fh)


def read_tensor(path):
    with open(path, "rb") as fh:
        arr = load_tensor(fh)
        extra = fh.read(1)
        if extra:
            raise DataError(f"trailing bytes after HFAT payload in {path}")
        return arr


def tensor_bytes(arr):
    buf = io.BytesIO()
    dump_tensor(arr, buf)
    return buf.getvalue()
