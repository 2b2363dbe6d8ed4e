"""Binary PPM (P6) / PGM (P5) reading and writing for 8-bit images.

Images are float arrays of shape (C, h, w) with values in [0, 1]; C is 3 for
PPM and 1 for PGM.
"""
from __future__ import annotations

import os

import numpy as np

__all__ = ["ImageFormatError", "read_image", "write_image", "image_io"]


class ImageFormatError(ValueError):
    pass


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos, n = 0, len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        if pos >= n:
            raise ImageFormatError("truncated header")
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("missing whitespace after header")
    return tokens, pos + 1


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic = buf[:2]
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    try:
        (_, w, h, maxval), offset = _header_tokens(buf, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError(f"{path}: malformed header ({exc})") from None
    if w <= 0 or h <= 0:
        raise ImageFormatError(f"{path}: bad dimensions {w}x{h}")
    if not 0 < maxval < 256:
        raise ImageFormatError(f"{path}: unsupported maxval {maxval} (8-bit only)")
    need = w * h * channels
    raster = buf[offset : offset + need]
    if len(raster) < need:
        raise ImageFormatError(f"{path}: truncated payload ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return arr.transpose(2, 0, 1).astype(np.float64) / maxval


def write_image(path, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageFormatError(f"expected (1|3, h, w) image, got shape {img.shape}")
    parent = os.path.dirname(os.fspath(path))
    if parent and not os.path.isdir(parent):
        raise FileNotFoundError(f"directory {parent} does not exist")
    c, h, w = img.shape
    q = np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    header = f"{'P6' if c == 3 else 'P5'}\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(q.transpose(1, 2, 0).tobytes())


def image_io(path, mode: str, image: np.ndarray | None = None):
    if mode == "read":
        return read_image(path)
    if mode == "write":
        if image is None:
            raise ValueError("write mode needs an image")
        write_image(path, image)
        return None
    raise ValueError(f"mode must be 'read' or 'write', got {mode!r}")
