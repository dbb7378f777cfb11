"""Binary portable pixmap I/O (P6 for RGB tiles, P5 for masks).

Only maxval 255 is supported; this is the one tile format the slide
container uses, chosen because it round-trips bit-exactly with no codec.
"""

from __future__ import annotations

import numpy as np

from .errors import SlideFormatError

_MAXVAL = 255


def _read_header(f) -> tuple[str, int, int]:
    """Parse a PNM header, returning (magic, width, height).

    Leaves the file positioned at the first byte of pixel data.
    """
    magic = f.read(2).decode("ascii", errors="replace")
    if magic not in ("P5", "P6"):
        raise SlideFormatError(f"not a binary PGM/PPM file (magic {magic!r})")
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = f.read(1)
        # skip whitespace and comment lines
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":
            f.readline()
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if not tok:
            raise SlideFormatError("truncated PNM header")
        fields.append(tok)
    try:
        width, height, maxval = (int(t) for t in fields)
    except ValueError as exc:
        raise SlideFormatError(f"bad PNM header field: {exc}") from exc
    if maxval != _MAXVAL:
        raise SlideFormatError(f"unsupported maxval {maxval} (need {_MAXVAL})")
    if width <= 0 or height <= 0:
        raise SlideFormatError(f"bad PNM dimensions {width}x{height}")
    return magic, width, height


def read_pnm_size(path) -> tuple[int, int, int]:
    """Return (width, height, channels) from the header without reading pixels."""
    with open(path, "rb") as f:
        magic, width, height = _read_header(f)
    return width, height, 3 if magic == "P6" else 1


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file into a uint8 array of shape (h, w) or (h, w, 3)."""
    with open(path, "rb") as f:
        magic, width, height = _read_header(f)
        channels = 3 if magic == "P6" else 1
        raw = f.read(width * height * channels)
    if len(raw) != width * height * channels:
        raise SlideFormatError(f"truncated pixel data in {path}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    if channels == 3:
        return arr.reshape(height, width, 3)
    return arr.reshape(height, width)


def encode_pnm(pixels: np.ndarray) -> bytes:
    """Encode a uint8 array of shape (h, w) as P5 or (h, w, 3) as P6."""
    if pixels.dtype != np.uint8:
        raise ValueError("pixel array must be uint8")
    if pixels.ndim == 2:
        magic = b"P5"
        h, w = pixels.shape
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
        h, w = pixels.shape[:2]
    else:
        raise ValueError(f"unsupported pixel array shape {pixels.shape}")
    header = magic + b"\n%d %d\n%d\n" % (w, h, _MAXVAL)
    return header + np.ascontiguousarray(pixels).tobytes()


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write a uint8 array of shape (h, w) as P5 or (h, w, 3) as P6."""
    with open(path, "wb") as f:
        f.write(encode_pnm(pixels))
