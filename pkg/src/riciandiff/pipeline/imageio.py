"""Lossless ``.f64`` images and 16-bit PGM previews.

``.f64`` layout: uint32 LE width, uint32 LE height, then height*width float64 LE
values in row-major order.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

F64_HEADER = struct.Struct("<II")


def atomic_write_bytes(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def encode_f64(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-d image, got shape {img.shape}")
    h, w = img.shape
    return F64_HEADER.pack(w, h) + img.astype("<f8").tobytes()


def decode_f64(data):
    if len(data) < F64_HEADER.size:
        raise ValueError("truncated .f64 header")
    w, h = F64_HEADER.unpack_from(data)
    body = data[F64_HEADER.size:]
    if len(body) != w * h * 8:
        raise ValueError(f".f64 body has {len(body)} bytes, expected {w * h * 8} for {w}x{h}")
    return np.frombuffer(body, dtype="<f8").reshape(h, w).astype(np.float64)


def write_f64(path, img):
    atomic_write_bytes(path, encode_f64(img))


def read_f64(path):
    return decode_f64(Path(path).read_bytes())


def write_pgm16(path, img):
    """Binary 16-bit PGM of ``img`` clipped to [0, 1]."""
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    pix = np.round(img * 65535).astype(">u2")
    atomic_write_bytes(path, f"P5\n{w} {h}\n65535\n".encode("ascii") + pix.tobytes())


def read_pgm16(path):
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5":
        raise ValueError(f"not a binary PGM: {magic!r}")
    dtype = ">u2" if maxval > 255 else "u1"
    pix = np.frombuffer(data[pos:], dtype=dtype, count=w * h).reshape(h, w)
    return pix.astype(np.float64) / maxval


IMAGE_SUFFIXES = (".f64", ".pgm")


def _suffix(path):
    path = Path(path)
    if path.suffix not in IMAGE_SUFFIXES:
        raise ValueError(f"unsupported image type {path.suffix!r}; use one of {IMAGE_SUFFIXES}")
    return path, path.suffix


def read_image(path):
    path, suffix = _suffix(path)
    if suffix == ".pgm":
        return read_pgm16(path)
    return read_f64(path)


def write_image(path, img):
    path, suffix = _suffix(path)
    if suffix == ".pgm":
        write_pgm16(path, img)
    else:
        write_f64(path, img)
