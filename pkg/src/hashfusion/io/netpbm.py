"""Binary PPM (P6) / PGM (P5) images, 8- or 16-bit (big-endian)."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator

import numpy as np


class ImageFormatError(ValueError):
    pass


def _read_header(data: bytes):
    tokens, pos = [], 2
    while len(tokens) < 3:
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
            raise ImageFormatError("truncated header")
        tokens.append(data[start:pos])
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise ImageFormatError("non-numeric header field") from None
    return w, h, maxval, pos + 1


def read_netpbm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    w, h, maxval, start = _read_header(data)
    if not 0 < maxval < 65536:
        raise ImageFormatError(f"{path}: invalid maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * channels
    if len(data) - start < n * dtype.itemsize:
        raise ImageFormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(data, dtype=dtype, count=n, offset=start)
    img = img.astype(np.uint16 if maxval > 255 else np.uint8)
    return img.reshape(h, w, 3) if channels == 3 else img.reshape(h, w)


def write_netpbm(path, img: np.ndarray):
    img = np.asarray(img)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ImageFormatError("expected an HxW or HxWx3 image")
    if img.dtype == np.uint8:
        maxval, payload = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, payload = 65535, img.astype(">u2").tobytes()
    else:
        raise ImageFormatError(f"unsupported dtype {img.dtype}")
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode())
        fh.write(payload)


@dataclass
class Frame:
    index: int
    depth: np.ndarray
    rgb: np.ndarray | None = None


def load_image_stream(depth_pattern: str, rgb_pattern: str | None = None, start: int = 0) -> Iterator[Frame]:
    """Yield frames ``start, start+1, ...`` until the first missing file.

    Patterns are printf-style templates such as ``"frames/%04i.pgm"``.
    """
    i = start
    while True:
        dpath = depth_pattern % i
        rpath = rgb_pattern % i if rgb_pattern else None
        if not os.path.exists(dpath) or (rpath is not None and not os.path.exists(rpath)):
            return
        depth = read_netpbm(dpath)
        if depth.ndim != 2:
            raise ImageFormatError(f"{dpath}: depth must be a PGM image")
        rgb = read_netpbm(rpath) if rpath else None
        yield Frame(i, depth, rgb)
        i += 1
