"""Pinhole intrinsics with two-term radial distortion, and plane homographies.

Image coordinates are continuous: pixel ``[i, j]`` covers the unit square
``[j, j+1) x [i, i+1)``, so its centre sits at ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CassError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0

    @property
    def f(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite([self.fx, self.fy, self.cx, self.cy, self.k1, self.k2])))

    def scaled(self, factor: float) -> CameraIntrinsics:
        """Intrinsics for the same camera after resizing the raster by ``factor``."""
        return replace(self, fx=self.fx * factor, fy=self.fy * factor, cx=self.cx * factor, cy=self.cy * factor)


class PlaneHomography:
    """World-plane mm ``(X, Y, 1)`` to undistorted pixel ``(u, v, 1)``, up to scale.

    Stored with unit Frobenius norm and a non-negative bottom-right entry.
    """

    __slots__ = ("_h",)

    def __init__(self, h: np.ndarray) -> None:
        h = np.array(h, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(h)):
            raise CassError("degenerate-configuration", "homography has non-finite entries")
        norm = np.linalg.norm(h)
        if norm == 0:
            raise CassError("degenerate-configuration", "zero homography")
        h = h / norm
        if h[2, 2] < 0 or (h[2, 2] == 0 and h.ravel()[np.flatnonzero(h)[0]] < 0):
            h = -h
        if abs(np.linalg.det(h)) < 1e-15:
            raise CassError("degenerate-configuration", "singular homography")
        h.setflags(write=False)
        self._h = h

    @property
    def h(self) -> np.ndarray:
        return self._h

    def __repr__(self) -> str:
        return f"PlaneHomography({np.array2string(self._h, precision=6)})"

    def __eq__(self, other: object) -> bool:
        return isinstance(other, PlaneHomography) and np.array_equal(self._h, other._h)

    def __hash__(self) -> int:
        return hash(self._h.tobytes())

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return apply_homography(self._h, pts)

    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self._h)


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Map ``(..., 2)`` points through a 3x3 matrix with perspective division."""
    pts = np.asarray(pts, dtype=float)
    x, y = pts[..., 0], pts[..., 1]
    w = h[2, 0] * x + h[2, 1] * y + h[2, 2]
    u = (h[0, 0] * x + h[0, 1] * y + h[0, 2]) / w
    v = (h[1, 0] * x + h[1, 1] * y + h[1, 2]) / w
    return np.stack([u, v], axis=-1)


def distort_points(points_px: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Apply the forward radial model to undistorted pixel coordinates."""
    p = np.asarray(points_px, dtype=float)
    x = (p[..., 0] - intr.cx) / intr.fx
    y = (p[..., 1] - intr.cy) / intr.fy
    r2 = x * x + y * y
    s = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    return np.stack([intr.cx + intr.fx * x * s, intr.cy + intr.fy * y * s], axis=-1)


def undistort_points(
    points_px: np.ndarray, intr: CameraIntrinsics, iterations: int = 10, tol: float = 1e-12
) -> np.ndarray:
    """Invert the radial model by fixed-point iteration.

    Runs at least ``iterations`` rounds and keeps going (up to 100) while
    any point still moves by more than ``tol`` normalised units.
    """
    p = np.asarray(points_px, dtype=float)
    xd = (p[..., 0] - intr.cx) / intr.fx
    yd = (p[..., 1] - intr.cy) / intr.fy
    x, y = xd.copy(), yd.copy()
    if intr.k1 != 0.0 or intr.k2 != 0.0:
        for it in range(100):
            r2 = x * x + y * y
            s = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
            nx, ny = xd / s, yd / s
            step = np.max(np.abs(nx - x), initial=0.0) + np.max(np.abs(ny - y), initial=0.0)
            x, y = nx, ny
            if it + 1 >= iterations and not step > tol:
                break
    return np.stack([intr.cx + intr.fx * x, intr.cy + intr.fy * y], axis=-1)


def project(h: PlaneHomography | np.ndarray, intr: CameraIntrinsics, world_mm: np.ndarray) -> np.ndarray:
    """World mm to observed (distorted) pixels."""
    hm = h.h if isinstance(h, PlaneHomography) else np.asarray(h, dtype=float)
    return distort_points(apply_homography(hm, world_mm), intr)


def homography_from_pose(
    f: float,
    cx: float,
    cy: float,
    rvec: np.ndarray,
    tvec: np.ndarray,
) -> np.ndarray:
    """Homography ``K [r1 r2 t]`` for a plane at Z=0 seen by a pinhole camera.

    ``rvec`` is an axis-angle rotation (radians); the camera looks along +Z.
    """
    rvec = np.asarray(rvec, dtype=float)
    theta = np.linalg.norm(rvec)
    if theta < 1e-15:
        rot = np.eye(3)
    else:
        k = rvec / theta
        kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        rot = np.eye(3) + np.sin(theta) * kx + (1 - np.cos(theta)) * kx @ kx
    kmat = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    return kmat @ np.column_stack([rot[:, 0], rot[:, 1], np.asarray(tvec, dtype=float)])
