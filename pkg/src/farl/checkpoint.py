"""Flat binary checkpoint format.

Layout (all integers little-endian)::

    magic      8 bytes   b"FARLCKPT"
    version    uint32    currently 1
    count      uint32    number of records
    record * count, sorted by name:
        name_len  uint16, name  utf-8 bytes
        ndim      uint8,  dims  uint32 * ndim
        values    float64 * prod(dims), row-major

Records are written in sorted-name order so identical state dicts produce
identical files.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FARLCKPT"
VERSION = 1


class CheckpointError(IOError):
    pass


def dumps(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(buf):
                raise CheckpointError(f"truncated record {name!r}")
            state[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint at byte {off}") from exc
    return state


def save(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing checkpoint: {p}")
    return loads(p.read_bytes())


def digest(state: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(state)).hexdigest()
