"""File formats: KHT1 tensors and binary PGM (P5) images.

KHT1 layout: magic ``b"KHT1"``, little-endian u32 rank, ``rank`` u32 dims,
then a little-endian float32 payload in row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

KHT_MAGIC = b"KHT1"
KHT_VERSION = 1


class FormatError(ValueError):
    pass


def write_kht(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    header = KHT_MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_kht(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != KHT_MAGIC:
        raise FormatError(f"{path}: not a KHT1 file")
    if len(data) < 8:
        raise FormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", data, 4)
    offset = 8 + 4 * rank
    if len(data) < offset:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", data, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) != offset + 4 * count:
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(data, dtype="<f4", offset=offset, count=count).reshape(dims).astype(float)


def _pgm_tokens(data: bytes, n: int):
    """Return the first ``n`` header tokens and the offset just past them."""
    tokens, i = [], 0
    while len(tokens) < n:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(data) and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError("truncated PGM header")
        tokens.append(data[start:i])
    return tokens, i + 1


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM as floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), offset = _pgm_tokens(data, 4)
    if magic != b"P5":
        raise FormatError(f"{path}: only binary PGM (P5) is supported")
    w, h, maxval = int(w), int(h), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h
    if len(data) - offset < count * np.dtype(dtype).itemsize:
        raise FormatError(f"{path}: truncated PGM payload")
    pixels = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
    return pixels.reshape(h, w).astype(float) / maxval


def write_pgm(path, image, normalize: bool = True) -> None:
    """Write an 8-bit P5 preview; ``normalize`` rescales by the image max."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if normalize:
        peak = img.max() if img.size else 0.0
        img = img / peak if peak > 0 else np.zeros_like(img)
    pixels = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(pixels.tobytes())


def read_image(path) -> np.ndarray:
    """Load an object image from PGM or a rank-2 KHT1 tensor."""
    ext = os.path.splitext(str(path))[1].lower()
    if ext in (".kht", ".kht1"):
        arr = read_kht(path)
        if arr.ndim != 2:
            raise FormatError(f"{path}: expected a rank-2 tensor, got rank {arr.ndim}")
        return arr
    return read_pgm(path)
