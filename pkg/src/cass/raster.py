"""8-bit raster helpers: validation, luma conversion and file IO.

Rasters are plain numpy arrays, ``(h, w)`` for grayscale or ``(h, w, 3)``
for RGB, dtype uint8, row-major.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CassError

LUMA = np.array([0.299, 0.587, 0.114])


def as_raster(image: np.ndarray) -> np.ndarray:
    """Validate and return ``image`` as a uint8 array with 1 or 3 channels."""
    arr = np.asarray(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] != 3):
        raise CassError("invalid-raster", f"expected (h, w) or (h, w, 3), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise CassError("invalid-raster", "empty raster")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.number) or not np.all(np.isfinite(arr)):
            raise CassError("invalid-raster", f"unsupported pixel data of dtype {arr.dtype}")
        arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    return arr


def to_gray(image: np.ndarray) -> np.ndarray:
    """Float64 luma in [0, 255]."""
    arr = as_raster(image)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    return arr.astype(np.float64) @ LUMA


def read_image(path: str | Path) -> np.ndarray:
    """Decode a JPEG/PNG file to uint8 gray or RGB without applying EXIF rotation."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "RGB"):
                data = np.asarray(im)
            elif im.mode in ("I;16", "I;16B", "I"):
                data = np.asarray(im.convert("L"))
            else:
                data = np.asarray(im.convert("RGB"))
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise CassError("not-an-image", f"cannot decode {path}: {exc}") from exc
    return as_raster(data.copy())


def write_png(path: str | Path, image: np.ndarray) -> None:
    """Write a PNG with fixed encoder settings so identical arrays give identical files."""
    arr = as_raster(image)
    Image.fromarray(arr).save(path, format="PNG", compress_level=6, optimize=False)
