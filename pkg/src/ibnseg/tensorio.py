"""Read and write the ``tensor v1`` file format.

One ASCII header line ``tensor v1 <rank> <d1> ... <dk>`` terminated by a
newline, followed by the row-major payload as little-endian float32.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

_DTYPE = np.dtype("<f4")


def encode_tensor(value) -> bytes:
    value = np.asarray(value)
    header = " ".join(["tensor", "v1", str(value.ndim), *map(str, value.shape)]) + "\n"
    return header.encode("ascii") + np.ascontiguousarray(value, dtype=_DTYPE).tobytes()


def decode_tensor(blob: bytes) -> np.ndarray:
    head, sep, payload = blob.partition(b"\n")
    if not sep:
        raise ValueError("tensor header is not newline-terminated")
    fields = head.decode("ascii").split()
    if fields[:2] != ["tensor", "v1"] or len(fields) < 3:
        raise ValueError(f"bad tensor header {head[:60]!r}")
    rank = int(fields[2])
    dims = [int(d) for d in fields[3:]]
    if len(dims) != rank or any(d < 1 for d in dims):
        raise ValueError(f"tensor header rank {rank} does not match dims {dims}")
    count = int(np.prod(dims)) if dims else 1
    if len(payload) != count * _DTYPE.itemsize:
        raise ValueError(f"payload has {len(payload)} bytes, expected {count * _DTYPE.itemsize}")
    return np.frombuffer(payload, dtype=_DTYPE).reshape(dims).copy()


def write_tensor(path, value) -> None:
    Path(path).write_bytes(encode_tensor(value))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())
