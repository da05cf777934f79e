"""Minimal binary NetPBM graymap (P5) reader/writer, 8-bit only."""

from __future__ import annotations

import os

import numpy as np


class PgmError(ValueError):
    pass


def to_bytes(image: np.ndarray) -> bytes:
    """Encode a [0, 1] float image as a P5 file body."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise PgmError(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes()


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(to_bytes(image))


def _tokens(data: bytes, count: int):
    """Yield ``count`` whitespace-separated header tokens, skipping comments."""
    pos = 0
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError("truncated header")
        out.append(data[start:pos])
    # exactly one whitespace byte separates header from raster
    return out, pos + 1


def from_bytes(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), offset = _tokens(data, 4)
    if magic != b"P5":
        raise PgmError(f"not a binary graymap: {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PgmError("non-numeric header field")
    if maxval != 255:
        raise PgmError("only maxval 255 is supported")
    raster = data[offset:offset + w * h]
    if len(raster) != w * h:
        raise PgmError("truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        return from_bytes(f.read())
