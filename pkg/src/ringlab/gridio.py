"""Grid persistence: RGF1 binary, 8-bit PGM (P5) and PPM (P6)."""

from __future__ import annotations

import re
import struct

import numpy as np

MAGIC = b"RGF1"


class FormatError(ValueError):
    pass


def _as_hwc(g):
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 2:
        return g[:, :, None]
    if g.ndim == 3:
        return g
    raise FormatError("grids must be (H, W) or (H, W, C)")


def encode_rgf1(g) -> bytes:
    g = _as_hwc(g)
    if not np.all(np.isfinite(g)):
        raise FormatError("grid contains non-finite values")
    h, w, c = g.shape
    return MAGIC + struct.pack("<III", h, w, c) + g.astype("<f8").tobytes(order="C")


def decode_rgf1(blob: bytes) -> np.ndarray:
    """Decode to (H, W) when C = 1, else (H, W, C)."""
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("not an RGF1 file")
    h, w, c = struct.unpack("<III", blob[4:16])
    n = h * w * c
    if h == 0 or w == 0 or c == 0 or len(blob) != 16 + 8 * n:
        raise FormatError(f"RGF1 payload size does not match header {h}x{w}x{c}")
    g = np.frombuffer(blob, dtype="<f8", count=n, offset=16).astype(np.float64).reshape(h, w, c)
    return g[:, :, 0] if c == 1 else g


def write_rgf1(path, g):
    with open(path, "wb") as f:
        f.write(encode_rgf1(g))


def read_rgf1(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_rgf1(f.read())


def quantize8(g) -> np.ndarray:
    """[0, 1] -> 0..255 with round-half-up; out-of-range values clamp."""
    g = np.asarray(g, dtype=np.float64)
    return np.clip(np.floor(g * 255.0 + 0.5), 0, 255).astype(np.uint8)


def encode_pnm(g) -> bytes:
    g = _as_hwc(g)
    h, w, c = g.shape
    if c == 1:
        kind = b"P5"
    elif c == 3:
        kind = b"P6"
    else:
        raise FormatError("PNM export needs 1 or 3 channels")
    return kind + b"\n%d %d\n255\n" % (w, h) + quantize8(g).tobytes(order="C")


_HEADER = re.compile(rb"\A(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                     rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def decode_pnm(blob: bytes) -> np.ndarray:
    m = _HEADER.match(blob)
    if not m:
        raise FormatError("not a binary PGM/PPM file")
    kind, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError("only 8-bit PGM/PPM is supported")
    c = 1 if kind == b"P5" else 3
    data = blob[m.end():]
    if len(data) != h * w * c:
        raise FormatError("PNM payload size does not match header")
    g = np.frombuffer(data, dtype=np.uint8).reshape(h, w, c) / 255.0
    return g[:, :, 0] if c == 1 else g


def write_pnm(path, g):
    with open(path, "wb") as f:
        f.write(encode_pnm(g))


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_pnm(f.read())
