"""Binary PPM (P6) image reading and writing.

P6 is the only image format this package touches: three ASCII header fields
(magic, dimensions, maxval) followed by raw interleaved RGB bytes.  Maxval is
fixed at 255.  Written headers are canonical ("P6\\n<w> <h>\\n255\\n") so
identical pixels always produce identical files; the reader additionally
accepts arbitrary whitespace and ``#`` comments between header fields.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import BadMagicError, FormatError, TruncatedFileError


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Write an (h, w, 3) uint8 array as a binary PPM."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"image must be (h, w, 3) uint8, got {img.shape} {img.dtype}")
    height, width = img.shape[:2]
    header = f"P6\n{width} {height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img).tobytes())


def _header_tokens(data: bytes, source: str) -> tuple[list[bytes], int]:
    """First four header tokens (magic, w, h, maxval) and the payload offset."""
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise TruncatedFileError(f"{source}: header ended early")
        byte = data[pos : pos + 1]
        if byte.isspace():
            pos += 1
        elif byte == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        else:
            start = pos
            while pos < len(data) and not data[pos : pos + 1].isspace():
                pos += 1
            tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the payload
    if pos >= len(data):
        raise TruncatedFileError(f"{source}: missing payload")
    return tokens, pos + 1


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary PPM into an (h, w, 3) uint8 array."""
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(b"P6"):
        raise BadMagicError(f"{path}: not a P6 image")
    tokens, offset = _header_tokens(data, str(path))
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric header field") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    if width < 1 or height < 1:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    need = width * height * 3
    payload = data[offset : offset + need]
    if len(payload) < need:
        raise TruncatedFileError(
            f"{path}: payload has {len(payload)} bytes, expected {need}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3).copy()
