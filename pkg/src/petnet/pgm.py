"""Binary PGM (P5) reading and 16-bit writing."""
import os
import re

import numpy as np

from .errors import FormatError, ShapeError

MAXVAL = 65535


def encode_pgm(image, scale=None) -> bytes:
    """Encode a 1×H×W (or H×W) nonnegative image as 16-bit big-endian P5.

    Values are mapped linearly so that ``scale`` becomes 65535; ``scale``
    defaults to the image maximum (1 for an all-zero image).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ShapeError(f"PGM holds one channel, got {img.shape}")
        img = img[0]
    if img.ndim != 2:
        raise ShapeError(f"expected a 1×H×W image, got {img.shape}")
    if np.any(img < 0) or not np.all(np.isfinite(img)):
        raise ValueError("PGM images must be finite and nonnegative")
    if scale is None:
        scale = float(img.max()) or 1.0
    if img.max() > scale * (1 + 1e-12):
        raise ValueError(f"image maximum {img.max()} exceeds scale {scale}")
    q = np.clip(np.rint(img / scale * MAXVAL), 0, MAXVAL).astype(">u2")
    H, W = img.shape
    return f"P5\n{W} {H}\n{MAXVAL}\n".encode("ascii") + q.tobytes()


def write_pgm(image, path, scale=None):
    """Write atomically (temp file, then rename)."""
    data = encode_pgm(image, scale)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pgm(data: bytes):
    """Parse P5 bytes; returns a 1×H×W tensor with values in [0, 1]."""
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise FormatError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PGM header") from None
    if W < 1 or H < 1 or not 0 < maxval <= MAXVAL:
        raise FormatError(f"invalid PGM dimensions or maxval: {W}×{H}, {maxval}")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError("missing whitespace after PGM header")
    pos += 1
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = W * H * np.dtype(dtype).itemsize
    if len(data) - pos < nbytes:
        raise FormatError(f"truncated PGM payload: need {nbytes} bytes, have {len(data) - pos}")
    values = np.frombuffer(data, dtype=dtype, count=W * H, offset=pos).astype(np.float64)
    return (values / maxval).reshape(1, H, W)


def read_pgm(path):
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())
