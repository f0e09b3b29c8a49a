"""Binary PPM (P6) and PGM (P5) with maxval 255."""

from __future__ import annotations

import os

import numpy as np


class PNMError(ValueError):
    pass


class BadMagic(PNMError):
    pass


class TruncatedFile(PNMError):
    pass


def _header(data: bytes) -> tuple[bytes, list[int], int]:
    """Return (magic, [width, height, maxval], offset of the raster)."""
    fields: list[bytes] = []
    i = 0
    n = len(data)
    while len(fields) < 4:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise TruncatedFile("header ends early")
        fields.append(data[i:j])
        i = j
        if len(fields) == 1 and fields[0] not in (b"P5", b"P6"):
            raise BadMagic(f"unsupported magic {fields[0][:2]!r}")
    if i >= n or not data[i : i + 1].isspace():
        raise TruncatedFile("missing whitespace after header")
    try:
        dims = [int(f) for f in fields[1:]]
    except ValueError:
        raise PNMError("non-numeric header field") from None
    if dims[2] != 255:
        raise PNMError(f"only maxval 255 is supported, got {dims[2]}")
    return fields[0], dims, i + 1


def _read(path, magic: bytes, channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] not in (b"P5", b"P6"):
        raise BadMagic(f"{os.fspath(path)}: not a binary PPM/PGM file")
    got, (w, h, _), off = _header(data)
    if got != magic:
        raise BadMagic(f"expected {magic!r}, found {got!r}")
    need = w * h * channels
    raster = data[off : off + need]
    if len(raster) < need:
        raise TruncatedFile(f"{os.fspath(path)}: {len(raster)} of {need} raster bytes")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def read_ppm_bytes(path) -> np.ndarray:
    """(h, w, 3) uint8."""
    return _read(path, b"P6", 3)


def read_pgm_bytes(path) -> np.ndarray:
    """(h, w) uint8."""
    return _read(path, b"P5", 1)


def load_image(path) -> np.ndarray:
    """P6 file as float64 (h, w, 3) in [0, 1]."""
    return read_ppm_bytes(path).astype(np.float64) / 255.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write (h, w, 3); floats are taken as [0, 1], uint8 as-is."""
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3:
        raise PNMError(f"PPM needs (h, w, 3), got {a.shape}")
    if a.dtype != np.uint8:
        a = to_uint8(a)
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        fh.write(np.ascontiguousarray(a).tobytes())


def write_pgm(path, image: np.ndarray) -> None:
    a = np.asarray(image)
    if a.ndim != 2:
        raise PNMError(f"PGM needs (h, w), got {a.shape}")
    if a.dtype != np.uint8:
        a = to_uint8(a)
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (a.shape[1], a.shape[0]))
        fh.write(np.ascontiguousarray(a).tobytes())
