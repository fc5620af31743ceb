"""Binary checkpoint format for named parameter tensors.

Layout (all integers little-endian u32 unless noted)::

    b"FRAMEckp" | version | config length | config (UTF-8 JSON)
    | tensor count | per tensor: name length, name (UTF-8), u8 bytes per real,
      ndim, dims..., raw little-endian reals
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FRAMEckp"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict | None = None) -> None:
    blob = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype.kind != "f" or arr.dtype.itemsize not in (4, 8):
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<BI", arr.dtype.itemsize, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(config, tensors)``; tensor order matches the file."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointError(f"{path}: truncated")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    version, clen = read("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    config = json.loads(data[pos : pos + clen].decode("utf-8"))
    pos += clen
    (count,) = read("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = read("<I")
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        width, ndim = read("<BI")
        shape = read(f"<{ndim}I") if ndim else ()
        dtype = np.dtype("<f4" if width == 4 else "<f8")
        n = int(np.prod(shape)) if shape else 1
        nbytes = n * width
        if pos + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated tensor {name}")
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        pos += nbytes
        tensors[name] = arr
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    return config, tensors
