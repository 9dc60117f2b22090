"""Flat binary container for named float64/int64 tensors.

Layout (little-endian):

    magic    8 bytes  b"DPAUDIT1"
    version  u32
    meta_len u32      followed by meta_len bytes of UTF-8 JSON (spec echo)
    n        u32      number of tensors, then per tensor:
        name_len u16, name bytes (UTF-8)
        dtype    u8   (0 = float64, 1 = int64)
        ndim     u8, dims as u32 each
        raw tensor bytes, C order

Round trips are bit-exact. Datasets, weights and reconstruction sets all use
this one format; a JSON sidecar carries the same metadata in readable form.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPAUDIT1"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1}


def write_container(path, tensors: dict, meta: dict, sidecar: bool = True) -> None:
    """Write ``tensors`` (name -> ndarray) plus ``meta`` to ``path``.

    A ``<path>.json`` sidecar with the metadata is written unless disabled.
    """
    path = Path(path)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)  # tobytes() below always emits C order
        if arr.dtype == np.float64:
            code = 0
        elif arr.dtype.kind in "iu":
            arr = arr.astype("<i8")
            code = 1
        else:
            arr = arr.astype("<f8")
            code = 0
        arr = arr.astype(_DTYPES[code], copy=False)
        name_b = name.encode()
        parts.append(struct.pack("<H", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path.write_bytes(b"".join(parts))
    if sidecar:
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(meta, sort_keys=True, indent=2) + "\n")


def read_container(path) -> tuple[dict, dict]:
    """Read a container; returns (tensors, meta)."""
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a dpaudit container")
    version, meta_len = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 16
    meta = json.loads(buf[off:off + meta_len].decode())
    off += meta_len
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode()
        off += name_len
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dtype = _DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off).reshape(shape)
        off += count * dtype.itemsize
        tensors[name] = arr.copy()
    return tensors, meta
