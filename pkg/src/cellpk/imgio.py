"""Raster types, binary PPM/PGM I/O and resampling.

Images are plain numpy arrays:

* a *patch* is ``uint8`` with shape ``(H, W, 3)`` in (row, column, channel) order,
* a *float image* is ``float64`` with shape ``(H, W, C)``, nominal range [0, 1],
* a *mask* is ``bool`` with shape ``(H, W)``; True marks geometrically valid pixels.

Pixel ``(i, j)`` sits at real coordinates ``(x=j, y=i)``; the image center is
``((W - 1) / 2, (H - 1) / 2)``.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

__all__ = [
    "ImageFormatError",
    "check_patch",
    "to_float",
    "to_patch",
    "quantize",
    "read_ppm",
    "write_ppm",
    "encode_ppm",
    "read_pgm",
    "write_pgm",
    "encode_pgm",
    "resize",
    "bilinear_sample",
    "bilinear_sample_many",
]


class ImageFormatError(ValueError):
    """Malformed PPM/PGM data. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def check_patch(patch: np.ndarray) -> np.ndarray:
    patch = np.asarray(patch)
    if patch.dtype != np.uint8 or patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"patch must be uint8 (H, W, 3), got {patch.dtype} {patch.shape}")
    if patch.shape[0] < 1 or patch.shape[1] < 1:
        raise ValueError("patch must be at least 1x1")
    return patch


def to_float(patch: np.ndarray) -> np.ndarray:
    return np.asarray(patch, dtype=np.float64) / 255.0


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8: round half up, then clamp."""
    q = np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def to_patch(img: np.ndarray) -> np.ndarray:
    return quantize(img)


# --- PPM / PGM -------------------------------------------------------------

_WHITESPACE = b" \t\r\n\v\f"


def _read_header(data: bytes, magic: bytes) -> tuple[int, int, int]:
    """Parse a netpbm header; returns (width, height, data_offset)."""
    if data[:2] != magic:
        raise ImageFormatError(f"expected magic {magic.decode()}, found {data[:2]!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        # skip whitespace and comments
        while pos < len(data):
            if data[pos] in _WHITESPACE:
                pos += 1
            elif data[pos] == ord("#"):
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                break
        start = pos
        while pos < len(data) and data[pos] not in _WHITESPACE and data[pos] != ord("#"):
            pos += 1
        token = data[start:pos]
        if not token:
            raise ImageFormatError("truncated header", start)
        if not token.isdigit():
            raise ImageFormatError(f"non-numeric header field {token!r}", start)
        fields.append((int(token), start))
    if pos >= len(data) or data[pos] not in _WHITESPACE:
        raise ImageFormatError("missing whitespace after maxval", pos)
    pos += 1
    (width, w_off), (height, h_off), (maxval, m_off) = fields
    if width < 1:
        raise ImageFormatError("width must be >= 1", w_off)
    if height < 1:
        raise ImageFormatError("height must be >= 1", h_off)
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}, only 255 is allowed", m_off)
    return width, height, pos


def _decode(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    width, height, offset = _read_header(data, magic)
    n = width * height * channels
    if len(data) - offset < n:
        raise ImageFormatError(
            f"truncated data: expected {n} samples, found {len(data) - offset}", len(data)
        )
    arr = np.frombuffer(data, dtype=np.uint8, count=n, offset=offset)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).copy()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P6 file with maxval 255 into an ``(H, W, 3)`` uint8 patch."""
    return _decode(Path(path).read_bytes(), b"P6", 3)


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary P5 file with maxval 255 into an ``(H, W)`` uint8 array."""
    return _decode(Path(path).read_bytes(), b"P5", 1)


def encode_ppm(patch: np.ndarray) -> bytes:
    patch = check_patch(patch)
    h, w = patch.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(patch).tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray)
    if gray.dtype != np.uint8 or gray.ndim != 2:
        raise ValueError(f"PGM data must be uint8 (H, W), got {gray.dtype} {gray.shape}")
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray).tobytes()


def write_ppm(patch: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_ppm(patch))


def write_pgm(gray: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_pgm(gray))


# --- resampling ------------------------------------------------------------


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) box-filter matrix; row k averages source span [k*s, (k+1)*s)."""
    s = n_in / n_out
    edges = np.arange(n_out + 1) * s
    lo, hi = edges[:-1, None], edges[1:, None]
    src = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, src + 1) - np.maximum(lo, src), 0.0, None)
    return overlap / s


def _bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) linear interpolation matrix, half-pixel aligned."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    w = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def _axis_weights(n_in: int, n_out: int, method: str) -> np.ndarray:
    if method == "auto":
        method = "area" if n_out < n_in else "bilinear"
    if method == "area":
        return _area_weights(n_in, n_out)
    if method == "bilinear":
        return _bilinear_weights(n_in, n_out)
    raise ValueError(f"unknown resize method {method!r}")


def resize(img: np.ndarray, out_w: int, out_h: int, method: str = "auto") -> np.ndarray:
    """Resize a float image to ``out_w`` x ``out_h``.

    ``method`` is ``"area"``, ``"bilinear"`` or ``"auto"`` (area when shrinking an
    axis, bilinear when enlarging it). Both methods are convex combinations, and
    the output is additionally clamped per channel to the input range so
    constants survive exactly despite rounding in the weights.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target dimensions must be >= 1, got {out_w}x{out_h}")
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        out = img.copy()
    else:
        wy = _axis_weights(h, out_h, method)
        wx = _axis_weights(w, out_w, method)
        c = img.shape[2]
        out = (wy @ img.reshape(h, w * c)).reshape(out_h, w, c)
        out = wx @ out
        lo = img.min(axis=(0, 1))
        hi = img.max(axis=(0, 1))
        out = np.clip(out, lo, hi)
    return out[:, :, 0] if squeeze else out


def bilinear_sample_many(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorised bilinear lookup; coordinates must already be inside the image.

    Returns an array of shape ``xs.shape + (C,)``.
    """
    h, w = img.shape[:2]
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.clip(x0, 0, w - 1)
    y0 = np.clip(y0, 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    # gathering rows of a flat (h*w, C) view is much cheaper than 2-D fancy indexing
    flat = img.reshape(h * w, *img.shape[2:])
    r0, r1 = y0 * w, y1 * w
    top = (1.0 - fx) * flat[r0 + x0] + fx * flat[r0 + x1]
    bottom = (1.0 - fx) * flat[r1 + x0] + fx * flat[r1 + x1]
    return (1.0 - fy) * top + fy * bottom


def bilinear_sample(img: np.ndarray, x: float, y: float) -> np.ndarray:
    """Sample ``img`` at real pixel coordinates ``(x, y)``; returns one value per channel.

    Integer coordinates return the stored pixel exactly.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    h, w = img.shape[:2]
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise ValueError(f"coordinate ({x}, {y}) outside image of size {w}x{h}")
    return bilinear_sample_many(img, np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))
