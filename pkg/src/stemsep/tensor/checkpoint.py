"""Flat binary parameter container.

Layout (all integers little-endian):
    magic   4 bytes  b"HSEP"
    version u32
    records until EOF:
        name_len u32, name utf-8 bytes,
        dtype    u8 (0 = float32, 1 = float64),
        rank     u8,
        dims     rank * u64,
        data     prod(dims) * itemsize raw little-endian scalars

Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"HSEP"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(IOError):
    pass


def save_params(path, named_arrays):
    """Write {name: ndarray} (or iterable of (name, ndarray)) to `path`."""
    items = named_arrays.items() if hasattr(named_arrays, "items") else named_arrays
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        for name, arr in items:
            arr = np.asarray(arr)
            if arr.dtype not in _DTYPE_TAGS:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_params(path):
    """Read a container back into an ordered {name: ndarray} dict."""
    out = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        vraw = fh.read(4)
        if len(vraw) != 4:
            raise CheckpointError(f"{path}: truncated header")
        (version,) = struct.unpack("<I", vraw)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        while True:
            head = fh.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError(f"{path}: truncated record header")
            (name_len,) = struct.unpack("<I", head)
            name = fh.read(name_len).decode("utf-8")
            meta = fh.read(2)
            if len(meta) != 2:
                raise CheckpointError(f"{path}: truncated metadata for {name!r}")
            tag, rank = struct.unpack("<BB", meta)
            if tag not in _TAG_DTYPES:
                raise CheckpointError(f"{path}: unknown dtype tag {tag} for {name!r}")
            dims_raw = fh.read(8 * rank)
            if len(dims_raw) != 8 * rank:
                raise CheckpointError(f"{path}: truncated dims for {name!r}")
            dims = struct.unpack(f"<{rank}Q", dims_raw)
            dtype = _TAG_DTYPES[tag]
            count = int(np.prod(dims)) if dims else 1
            payload = fh.read(count * dtype.itemsize)
            if len(payload) != count * dtype.itemsize:
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out
