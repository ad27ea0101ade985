"""Binary PPM (P6) reading and writing.

Only the 8-bit, maxval-255 flavour is supported; that is all the
pipeline produces and it keeps round trips bit-exact.
"""

from __future__ import annotations

import os

import numpy as np


class PPMError(ValueError):
    pass


def encode_ppm(pixels: np.ndarray) -> bytes:
    arr = np.asarray(pixels)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PPMError(f"expected an HxWx3 array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise PPMError(f"expected uint8 pixels, got {arr.dtype}")
    h, w, _ = arr.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(arr).tobytes()


def write_ppm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    data = encode_ppm(pixels)
    with open(path, "wb") as fh:
        fh.write(data)


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out: list[bytes] = []
    pos = 0
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PPMError("truncated PPM header")
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    toks, offset = _tokens(buf, 4)
    if toks[0] != b"P6":
        raise PPMError(f"not a binary PPM (magic {toks[0]!r})")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError as exc:
        raise PPMError(f"malformed PPM header: {exc}") from None
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}")
    need = w * h * 3
    raster = buf[offset : offset + need]
    if len(raster) != need:
        raise PPMError(f"PPM raster truncated: expected {need} bytes, got {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())
