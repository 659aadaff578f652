"""Binary grid container and PGM readers/writers.

Binary grid layout (all integers little-endian)::

    b"ADCS" | u8 kind | u32 width | u32 height | float64 payload

``kind`` is 0 image, 1 displacement field (all dx then all dy), 2 score map,
3 mask (stored as 0.0/1.0). Kind 4 is reserved for estimator checkpoints,
see :mod:`adacs.estimators`.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .field_core import ShapeError, as_mask

MAGIC = b"ADCS"
KIND_IMAGE, KIND_FIELD, KIND_SCORE, KIND_MASK, KIND_CHECKPOINT = 0, 1, 2, 3, 4
_HEADER = struct.Struct("<4sBII")


class FormatError(ValueError):
    """Malformed or truncated file; the message names the byte offset."""


def pack_header(kind, width, height):
    return _HEADER.pack(MAGIC, kind, width, height)


def unpack_header(buf):
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header at byte offset {len(buf)}")
    magic, kind, width, height = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0")
    return kind, width, height, _HEADER.size


def encode_grid(arr, kind):
    """Serialize a 2D grid (or a (2, H, W) field) to bytes."""
    arr = np.asarray(arr)
    if kind == KIND_FIELD:
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise ShapeError(f"field must have shape (2, H, W), got {arr.shape}")
        h, w = arr.shape[1:]
    else:
        if arr.ndim != 2:
            raise ShapeError(f"grid must be 2D, got {arr.shape}")
        h, w = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return pack_header(kind, w, h) + payload


def decode_grid(buf):
    """Inverse of :func:`encode_grid`; returns ``(kind, array)``."""
    kind, w, h, off = unpack_header(buf)
    if kind not in (KIND_IMAGE, KIND_FIELD, KIND_SCORE, KIND_MASK):
        raise FormatError(f"unsupported grid kind {kind} at byte offset 4")
    channels = 2 if kind == KIND_FIELD else 1
    n = channels * w * h
    need = off + 8 * n
    if len(buf) < need:
        raise FormatError(f"truncated payload: expected {need} bytes, data ends at byte offset {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"trailing bytes after payload at byte offset {need}")
    data = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
    shape = (2, h, w) if kind == KIND_FIELD else (h, w)
    data = data.reshape(shape)
    if kind == KIND_MASK:
        return kind, data != 0.0
    return kind, data


def write_grid(path, arr, kind):
    if kind == KIND_MASK:
        arr = as_mask(arr).astype(np.float64)
    Path(path).write_bytes(encode_grid(arr, kind))


def read_grid(path, expect=None):
    kind, arr = decode_grid(Path(path).read_bytes())
    if expect is not None and kind != expect:
        raise FormatError(f"{path}: expected kind {expect}, found {kind} at byte offset 4")
    return arr


def _pgm_tokens(buf, count):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        if pos >= len(buf):
            raise FormatError(f"unexpected end of header at byte offset {pos}")
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((buf[start:pos], start))
    return tokens, pos


def read_pgm(path):
    """Read a P2 or P5 PGM file and normalize intensities by ``maxval``."""
    buf = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(buf, 4)
    (magic, _), (w_tok, w_off), (h_tok, h_off), (m_tok, m_off) = tokens
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"unsupported magic {magic!r} at byte offset 0")
    try:
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError:
        bad = next(off for tok, off in ((w_tok, w_off), (h_tok, h_off), (m_tok, m_off))
                   if not tok.isdigit())
        raise FormatError(f"non-numeric header field at byte offset {bad}") from None
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid dimensions at byte offset {w_off}")
    if not (0 < maxval <= 65535):
        raise FormatError(f"invalid maxval {maxval} at byte offset {m_off}")
    n = width * height
    if magic == b"P5":
        # single whitespace byte separates header from raster
        start = pos + 1
        size = 1 if maxval < 256 else 2
        need = start + n * size
        if len(buf) < need:
            raise FormatError(f"truncated raster: data ends at byte offset {len(buf)}, need {need}")
        dtype = np.uint8 if size == 1 else ">u2"
        vals = np.frombuffer(buf, dtype=dtype, count=n, offset=start).astype(np.float64)
    else:
        parts = []
        for line in buf[pos:].splitlines():
            parts.extend(line.split(b"#", 1)[0].split())
        if len(parts) < n:
            raise FormatError(f"truncated raster: {len(parts)} of {n} values before byte offset {len(buf)}")
        try:
            vals = np.array([int(p) for p in parts[:n]], dtype=np.float64)
        except ValueError:
            raise FormatError(f"non-numeric raster value after byte offset {pos}") from None
    if vals.max(initial=0) > maxval:
        raise FormatError(f"raster value exceeds maxval {maxval}")
    return (vals / maxval).reshape(height, width)


def write_pgm(img, path):
    """Write a [0, 1] grid as binary P5 with maxval 255."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"PGM export needs a 2D grid, got {arr.shape}")
    data = np.clip(np.floor(arr * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_mask_pgm(path, threshold=0.5):
    return read_pgm(path) >= threshold
