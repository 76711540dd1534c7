"""Binary PGM (P5) / PPM (P6) reading and writing, 8- or 16-bit.

16-bit samples are big-endian as the format requires.  Images are returned
as float arrays of shape (C, H, W) scaled to [0, 1].
"""
from __future__ import annotations

import os

import numpy as np


class PnmError(ValueError):
    pass


def _tokens(buf: bytes, pos: int, count: int) -> tuple[list[int], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PnmError("truncated header")
        out.append(int(buf[start:pos]))
    # exactly one whitespace byte separates header and raster
    return out, pos + 1


def decode(buf: bytes) -> tuple[np.ndarray, int]:
    """Returns ``(image (C, H, W) in [0, 1], maxval)``."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"unsupported magic {magic!r}; only binary P5/P6")
    (w, h, maxval), pos = _tokens(buf, 2, 3)
    if not 0 < maxval < 65536:
        raise PnmError(f"bad maxval {maxval}")
    c = 1 if magic == b"P5" else 3
    dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * c * dt.itemsize
    raster = buf[pos : pos + need]
    if len(raster) != need:
        raise PnmError(f"raster truncated: need {need} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=dt).reshape(h, w, c).transpose(2, 0, 1)
    return arr.astype(np.float64) / maxval, maxval


def encode(img: np.ndarray, bits: int = 8) -> bytes:
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise PnmError(f"need 1 or 3 channels, got {c}")
    if bits not in (8, 16):
        raise PnmError("bits must be 8 or 16")
    maxval = (1 << bits) - 1
    q = np.round(np.clip(img, 0.0, 1.0) * maxval)
    dt = ">u2" if bits == 16 else "u1"
    head = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n{maxval}\n".encode("ascii")
    return head + q.transpose(1, 2, 0).astype(dt).tobytes()


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())[0]


def write_pnm(path: str | os.PathLike, img: np.ndarray, bits: int = 8) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(img, bits))


def is_pnm(path: str | os.PathLike) -> bool:
    return str(path).lower().endswith((".pgm", ".ppm", ".pnm"))
