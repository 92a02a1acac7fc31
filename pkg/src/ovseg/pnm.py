"""Minimal binary PPM (P6) and PGM (P5) reader/writer.

Only maxval 255 is written; the reader accepts any maxval up to 255 and
reports malformed input with the file name and byte offset.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np


class PnmParseError(ValueError):
    """Malformed PPM/PGM content."""

    def __init__(self, path: str | Path, offset: int, message: str):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def _parse_header(data: bytes, path: str | Path) -> tuple[str, int, int, int, int]:
    """Return (magic, width, height, maxval, raster offset)."""
    pos = 0

    def skip_space(require_one: bool = False) -> None:
        nonlocal pos
        seen = False
        while pos < len(data):
            c = data[pos : pos + 1]
            if c.isspace():
                pos += 1
                seen = True
            elif c == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
                seen = True
            else:
                break
        if require_one and not seen:
            raise PnmParseError(path, pos, "expected whitespace")

    def read_int() -> int:
        nonlocal pos
        skip_space()
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if pos == start:
            raise PnmParseError(path, pos, "expected an integer")
        return int(data[start:pos])

    if data[:2] not in (b"P5", b"P6"):
        raise PnmParseError(path, 0, f"bad magic {data[:2]!r}, expected P5 or P6")
    magic = data[:2].decode("ascii")
    pos = 2
    width = read_int()
    height = read_int()
    maxval = read_int()
    if width <= 0 or height <= 0:
        raise PnmParseError(path, pos, f"bad dimensions {width}x{height}")
    if not (0 < maxval <= 255):
        raise PnmParseError(path, pos, f"unsupported maxval {maxval}")
    # Exactly one whitespace byte separates the header from the raster.
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise PnmParseError(path, pos, "expected single whitespace before raster")
    pos += 1
    return magic, width, height, maxval, pos


def read_pnm(path: str | Path) -> tuple[str, np.ndarray]:
    """Read a binary PPM/PGM file.

    Returns ("P6", (H, W, 3) uint8) or ("P5", (H, W) uint8).
    """
    data = Path(path).read_bytes()
    magic, width, height, maxval, pos = _parse_header(data, path)
    channels = 3 if magic == "P6" else 1
    expected = width * height * channels
    raster = data[pos : pos + expected]
    if len(raster) < expected:
        raise PnmParseError(path, pos + len(raster), f"raster truncated, expected {expected} bytes")
    arr = np.frombuffer(raster, dtype=np.uint8).copy()
    if np.any(arr > maxval):
        bad = int(np.argmax(arr > maxval))
        raise PnmParseError(path, pos + bad, f"sample exceeds maxval {maxval}")
    if channels == 3:
        return magic, arr.reshape(height, width, 3)
    return magic, arr.reshape(height, width)


def write_ppm(path: str | Path, pixels: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary P6, maxval 255."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) array, got {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary P5, maxval 255."""
    values = np.asarray(values, dtype=np.uint8)
    if values.ndim != 2:
        raise ValueError(f"expected (H, W) array, got {values.shape}")
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(values.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    magic, arr = read_pnm(path)
    if magic != "P6":
        raise PnmParseError(path, 0, "expected a P6 (PPM) file")
    return arr


def read_pgm(path: str | Path) -> np.ndarray:
    magic, arr = read_pnm(path)
    if magic != "P5":
        raise PnmParseError(path, 0, "expected a P5 (PGM) file")
    return arr
