"""Metric rectification: resample a photo onto the board's X-Y grid.

Output pixel ``[v, u]`` shows the board point at its centre,
``((u + 0.5) / np, (v + 0.5) / np)`` mm, so board mm ``(X, Y)`` lands at
output coordinate ``(X * np, Y * np)`` and the board origin is the top-left
corner of the output raster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, PlaneHomography, apply_homography, distort_points
from .errors import CassError
from .pattern import BoardSpec
from .raster import as_raster


@dataclass(frozen=True)
class RectifySpec:
    np: float
    board_width_mm: float
    board_height_mm: float

    def __post_init__(self) -> None:
        if not (self.np > 0 and np.isfinite(self.np)):
            raise CassError("invalid-parameters", f"pixels per mm must be positive, got {self.np}")
        if self.out_width_px < 1 or self.out_height_px < 1:
            raise CassError("invalid-parameters", "output raster would be empty")

    @classmethod
    def for_board(cls, spec: BoardSpec, px_per_mm: float) -> RectifySpec:
        return cls(px_per_mm, spec.board_width_mm, spec.board_height_mm)

    @property
    def out_width_px(self) -> int:
        return int(round(self.board_width_mm * self.np))

    @property
    def out_height_px(self) -> int:
        return int(round(self.board_height_mm * self.np))


def bilinear_sample(image: np.ndarray, x: float, y: float) -> np.ndarray | float:
    """Blend the four lattice neighbours of ``(x, y)`` in index coordinates.

    Integer coordinates address pixel ``image[y, x]`` exactly; anything
    outside ``[0, w-1] x [0, h-1]`` is black.
    """
    out = sample_bilinear(image, np.array([x], dtype=float), np.array([y], dtype=float))
    return out[0] if out.ndim > 1 else float(out[0])


def sample_bilinear(image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorised bilinear lookup; returns float64 of shape ``xs.shape (+ channels)``."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    valid = (xs >= 0) & (xs <= w - 1) & (ys >= 0) & (ys <= h - 1)
    xv = np.where(valid, xs, 0.0)
    yv = np.where(valid, ys, 0.0)
    x0 = np.minimum(np.floor(xv).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yv).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    ax = xv - x0
    ay = yv - y0
    if img.ndim == 3:
        ax, ay, valid = ax[..., None], ay[..., None], valid[..., None]
    f = img.astype(np.float64, copy=False)
    top = f[y0, x0] * (1 - ax) + f[y0, x1] * ax
    bot = f[y1, x0] * (1 - ax) + f[y1, x1] * ax
    return np.where(valid, top * (1 - ay) + bot * ay, 0.0)


def output_to_source(
    intrinsics: CameraIntrinsics, h: PlaneHomography, spec: RectifySpec, rows: slice | None = None
) -> np.ndarray:
    """Source image coordinates (continuous) for every output pixel centre."""
    rows = rows or slice(0, spec.out_height_px)
    vs = np.arange(rows.start, rows.stop, dtype=float)
    us = np.arange(spec.out_width_px, dtype=float)
    world = np.stack(np.meshgrid((us + 0.5) / spec.np, (vs + 0.5) / spec.np), axis=-1)
    und = apply_homography(h.h, world)
    return distort_points(und, intrinsics)


def rectify_image(
    image: np.ndarray,
    intrinsics: CameraIntrinsics,
    h: PlaneHomography,
    spec: RectifySpec,
    block_rows: int = 256,
) -> np.ndarray:
    """Inverse-map every output pixel through the homography and lens model.

    Output keeps the input's dtype (uint8) and channel count; samples that
    fall outside the source are black.
    """
    img = as_raster(image)
    if not intrinsics.is_finite() or not np.all(np.isfinite(h.h)):
        raise CassError("invalid-calibration", "calibration has non-finite values")
    out_shape = (spec.out_height_px, spec.out_width_px) + img.shape[2:]
    out = np.zeros(out_shape, dtype=np.uint8)
    # rows are independent; blocks bound the temporary memory
    for start in range(0, spec.out_height_px, block_rows):
        rows = slice(start, min(start + block_rows, spec.out_height_px))
        src = output_to_source(intrinsics, h, spec, rows)
        with np.errstate(invalid="ignore"):
            vals = sample_bilinear(img, src[..., 0] - 0.5, src[..., 1] - 0.5)
        out[rows] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    return out
