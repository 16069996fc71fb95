"""Binary PPM (P6) / PGM (P5) readers and writers, 8-bit only."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractViolation


class ImageFormatError(ContractViolation):
    pass


def _read_header(buf: bytes, path) -> tuple[bytes, int, int, int, int]:
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        fields.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    magic = fields[0]
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: non-integer header field in {fields[1:]!r}") from None
    return magic, width, height, maxval, pos


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    got, width, height, maxval, offset = _read_header(buf, path)
    if got != magic:
        raise ImageFormatError(f"{path}: expected magic {magic.decode()}, got {got!r}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval must be 255, got {maxval}")
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"{path}: bad dimensions {width}x{height}")
    n = width * height * channels
    data = buf[offset : offset + n]
    if len(data) != n:
        raise ImageFormatError(f"{path}: raster has {len(data)} bytes, expected {n}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, channels)
    return arr if channels > 1 else arr[..., 0]


def read_ppm(path) -> np.ndarray:
    """Return an ``(H, W, 3)`` uint8 array."""
    return _read(path, b"P6", 3).copy()


def read_pgm(path) -> np.ndarray:
    """Return an ``(H, W)`` uint8 array."""
    return _read(path, b"P5", 1).copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write ``(H, W, 3)`` uint8, or floats in [0, 1] (rounded)."""
    img = to_uint8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"PPM needs an (H, W, 3) array, got {img.shape}")
    h, w, _ = img.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    img = to_uint8(img)
    if img.ndim != 2:
        raise ContractViolation(f"PGM needs an (H, W) array, got {img.shape}")
    h, w = img.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes())
