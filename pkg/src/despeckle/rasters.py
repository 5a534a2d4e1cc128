"""Single-channel raster input/output.

Supported formats, dispatched on file extension:

* ``.png``  - 8-bit or 16-bit grayscale PNG (via Pillow).
* ``.pgm``  - binary PGM (P5), 8-bit or 16-bit big-endian sample order.
* ``.raw``  - flat 32-bit little-endian floats plus a JSON sidecar
  ``<path>.json`` holding ``{"width": W, "height": H}``.

Reads return float64 arrays in the raster's native intensity units together
with a :class:`RasterInfo` describing how to write a matching output.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .errors import FormatError

_EXTENSIONS = (".png", ".pgm", ".raw")


@dataclass(frozen=True)
class RasterInfo:
    kind: str  # "png" | "pgm" | "raw"
    width: int
    height: int
    maxval: int | None  # None for float rasters


def supported(path) -> bool:
    return os.path.splitext(str(path))[1].lower() in _EXTENSIONS


def read_raster(path) -> tuple[np.ndarray, RasterInfo]:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        return _read_png(path)
    if ext == ".pgm":
        return _read_pgm(path)
    if ext == ".raw":
        return _read_raw(path)
    raise FormatError(f"unsupported raster extension {ext!r} (expected one of {_EXTENSIONS})")


def write_raster(path, array: np.ndarray, info: RasterInfo) -> None:
    """Write ``array`` in the format described by ``info``.

    Integer formats round and clip into [0, maxval]; the raw format writes
    float32 values untouched plus the JSON sidecar.
    """
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"rasters are 2-d single-channel, got shape {arr.shape}")
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".png":
        _write_png(path, arr, info.maxval)
    elif ext == ".pgm":
        _write_pgm(path, arr, info.maxval)
    elif ext == ".raw":
        _write_raw(path, arr)
    else:
        raise FormatError(f"unsupported raster extension {ext!r}")


def _quantize_to(arr: np.ndarray, maxval: int) -> np.ndarray:
    if maxval not in (255, 65535):
        raise FormatError(f"integer rasters need maxval 255 or 65535, got {maxval}")
    clipped = np.clip(np.rint(arr), 0, maxval)
    return clipped.astype(np.uint8 if maxval == 255 else np.uint16)


def _read_png(path) -> tuple[np.ndarray, RasterInfo]:
    with Image.open(path) as img:
        if img.mode == "L":
            maxval = 255
        elif img.mode in ("I;16", "I;16B", "I"):
            maxval = 65535
        else:
            raise FormatError(
                f"{path}: PNG mode {img.mode!r} not supported (single-channel 8/16-bit only)"
            )
        arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise FormatError(f"{path}: expected single-channel image, got shape {arr.shape}")
    h, w = arr.shape
    return arr, RasterInfo("png", w, h, maxval)


def _write_png(path, arr: np.ndarray, maxval: int | None) -> None:
    if maxval is None:
        maxval = 255
    data = _quantize_to(arr, maxval)
    # uint8 -> "L", uint16 -> "I;16"; mode inferred from the dtype
    Image.fromarray(data).save(path)


def _read_pgm(path) -> tuple[np.ndarray, RasterInfo]:
    with open(path, "rb") as f:
        raw = f.read()
    tokens, offset = _pgm_header_tokens(raw, path)
    magic, width, height, maxval = tokens
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r})")
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError as e:
        raise FormatError(f"{path}: malformed PGM header") from e
    if not (0 < maxval < 65536):
        raise FormatError(f"{path}: PGM maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    payload = raw[offset : offset + expected]
    if len(payload) != expected:
        raise FormatError(f"{path}: truncated PGM payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(height, width).astype(np.float64)
    return arr, RasterInfo("pgm", width, height, 65535 if maxval > 255 else 255)


def _pgm_header_tokens(raw: bytes, path) -> tuple[list[bytes], int]:
    # header = 4 whitespace-separated tokens, '#' comments allowed, then one
    # whitespace byte before the payload
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise FormatError(f"{path}: truncated PGM header")
        c = raw[i : i + 1]
        if c == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(raw) and not raw[i : i + 1].isspace() and raw[i : i + 1] != b"#":
                i += 1
            tokens.append(raw[start:i])
    if i >= len(raw) or not raw[i : i + 1].isspace():
        raise FormatError(f"{path}: malformed PGM header")
    return tokens, i + 1


def _write_pgm(path, arr: np.ndarray, maxval: int | None) -> None:
    if maxval is None:
        maxval = 255
    data = _quantize_to(arr, maxval)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        if maxval > 255:
            f.write(data.astype(">u2").tobytes())
        else:
            f.write(data.tobytes())


def _sidecar_path(path) -> str:
    return str(path) + ".json"


def _read_raw(path) -> tuple[np.ndarray, RasterInfo]:
    sidecar = _sidecar_path(path)
    if not os.path.exists(sidecar):
        raise FormatError(f"{path}: missing JSON sidecar {sidecar}")
    with open(sidecar, "r", encoding="utf-8") as f:
        try:
            meta = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{sidecar}: invalid JSON sidecar: {e}") from e
    try:
        width, height = int(meta["width"]), int(meta["height"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{sidecar}: sidecar must contain integer width and height") from e
    data = np.fromfile(path, dtype="<f4")
    if data.size != width * height:
        raise FormatError(
            f"{path}: raw payload has {data.size} floats, sidecar says {width}x{height}"
        )
    return data.reshape(height, width).astype(np.float64), RasterInfo("raw", width, height, None)


def _write_raw(path, arr: np.ndarray) -> None:
    h, w = arr.shape
    arr.astype("<f4").tofile(path)
    with open(_sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump({"width": w, "height": h}, f, sort_keys=True)
        f.write("\n")
