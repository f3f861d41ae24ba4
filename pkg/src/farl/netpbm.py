"""Binary PPM (P6) and PGM (P5) files with maxval 255.

Files are written as ``magic\\nW H\\n255\\n`` followed by raw bytes. The
reader also tolerates arbitrary whitespace and ``#`` comments in the header.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _parse_header(buf: bytes, magic: bytes) -> tuple[int, int, int]:
    """Returns (width, height, payload offset)."""
    if buf[:2] != magic:
        raise NetpbmError(f"bad magic at byte 0: expected {magic!r}, found {buf[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            raise NetpbmError(f"truncated header at byte {pos}")
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = buf.find(b"\n", pos)
            pos = len(buf) if end < 0 else end + 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append((int(buf[start:pos]), start))
        else:
            raise NetpbmError(f"unexpected byte {ch!r} in header at byte {pos}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise NetpbmError(f"missing whitespace after maxval at byte {pos}")
    (w, _), (h, _), (maxval, at) = fields
    if maxval != 255:
        raise NetpbmError(f"unsupported maxval {maxval} at byte {at}; only 255 is accepted")
    if w < 1 or h < 1:
        raise NetpbmError(f"non-positive dimensions {w}x{h}")
    return w, h, pos + 1


def _decode(buf: bytes, magic: bytes, channels: int) -> np.ndarray:
    w, h, off = _parse_header(buf, magic)
    need = w * h * channels
    if len(buf) - off < need:
        raise NetpbmError(f"truncated payload: need {need} bytes from byte {off}, have {len(buf) - off}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return data.reshape((h, w, channels) if channels > 1 else (h, w)).copy()


def _encode(arr, magic: bytes, channels: int) -> bytes:
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        a = np.clip(np.rint(np.asarray(a, dtype=np.float64)), 0, 255).astype(np.uint8)
    want = 3 if channels > 1 else 2
    if a.ndim != want or (channels > 1 and a.shape[2] != 3):
        raise NetpbmError(f"expected array of shape {'(H, W, 3)' if channels > 1 else '(H, W)'}, got {a.shape}")
    h, w = a.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(a).tobytes()


def read_ppm(path) -> np.ndarray:
    """(H, W, 3) uint8."""
    return _decode(Path(path).read_bytes(), b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """(H, W) uint8."""
    return _decode(Path(path).read_bytes(), b"P5", 1)


def write_ppm(path, rgb) -> None:
    """``rgb``: (H, W, 3) in 0..255; floats are clamp-rounded."""
    Path(path).write_bytes(_encode(rgb, b"P6", 3))


def write_pgm(path, gray) -> None:
    Path(path).write_bytes(_encode(gray, b"P5", 1))


def decode_ppm(buf: bytes) -> np.ndarray:
    return _decode(buf, b"P6", 3)


def encode_ppm(rgb) -> bytes:
    return _encode(rgb, b"P6", 3)


def encode_pgm(gray) -> bytes:
    return _encode(gray, b"P5", 1)


def to_chw(rgb: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float (3, H, W) in [0, 1]."""
    return np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) / 255.0


def to_hwc(img: np.ndarray) -> np.ndarray:
    """float (3, H, W) in [0, 1] -> 0..255 float (H, W, 3)."""
    return np.asarray(img, dtype=np.float64).transpose(1, 2, 0) * 255.0
