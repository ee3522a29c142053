"""Float RGB images and the binary PPM (P6) format of record."""
from __future__ import annotations

import numpy as np

from .errors import FormatError, InvalidInputError


class Image:
    """Row-major RGB image, top-left origin; channels clamped to [0, 1] on
    construction."""

    def __init__(self, pixels: np.ndarray):
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.shape[0] < 1 or pixels.shape[1] < 1:
            raise InvalidInputError(f"pixels must have shape (h, w, 3), got {pixels.shape}")
        self.pixels = np.clip(pixels, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_bytes(self) -> np.ndarray:
        """Quantized u8 raster: byte = round(255 * clamp(c, 0, 1))."""
        return np.rint(255.0 * self.pixels).astype(np.uint8)

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


def write_ppm(image: Image, path) -> None:
    """Binary PPM, maxval 255, row-major top-left; bit-exact format of record."""
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(image.to_bytes().tobytes())


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    # Skip whitespace and '#' comment lines between header tokens.
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated PPM header")
    return data[start:pos], pos


def read_ppm(path) -> Image:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise FormatError(f"not a binary PPM: magic {data[:2]!r}")
    pos = 2
    try:
        w_tok, pos = _read_token(data, pos)
        h_tok, pos = _read_token(data, pos)
        max_tok, pos = _read_token(data, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(max_tok)
    except ValueError as exc:
        raise FormatError(f"malformed PPM header: {exc}") from exc
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"invalid PPM dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * 3
    raster = data[pos:pos + expected]
    if len(raster) != expected:
        raise FormatError(f"PPM raster has {len(raster)} bytes, expected {expected}")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return Image(arr.astype(np.float64) / 255.0)
