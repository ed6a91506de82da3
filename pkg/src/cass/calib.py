"""Per-image calibration from one view of the board.

The pipeline is: pair detected corners with board coordinates, fit a
homography robustly on (undistorted) corners, then refine focal length,
two radial coefficients and the homography jointly by Levenberg-Marquardt
on the reprojection error.  The principal point stays at the image centre;
a single planar view cannot separate it from the homography.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from .camera import CameraIntrinsics, PlaneHomography, apply_homography, project, undistort_points
from .errors import CassError
from .pattern import BoardSpec, corner_coords

if TYPE_CHECKING:
    from .detect import MarkerDetection

logger = logging.getLogger(__name__)

MIN_MARKERS = 2
RANSAC_THRESHOLD_PX = 3.0
RANSAC_CONFIDENCE = 0.999
LM_MAX_ITERATIONS = 100
LM_REL_TOL = 1e-10


@dataclass(frozen=True)
class Correspondences:
    world: np.ndarray  # (N, 2) mm
    image: np.ndarray  # (N, 2) px
    ids: np.ndarray  # (N,) marker id
    corner_index: np.ndarray  # (N,) 0..3

    def __post_init__(self) -> None:
        world = np.asarray(self.world, dtype=float).reshape(-1, 2)
        image = np.asarray(self.image, dtype=float).reshape(-1, 2)
        n = len(world)
        ids = np.asarray(self.ids if len(self.ids) else np.full(n, -1), dtype=np.int64)
        cidx = np.asarray(self.corner_index if len(self.corner_index) else np.arange(n), dtype=np.int64)
        if len(image) != n or len(ids) != n or len(cidx) != n:
            raise CassError("invalid-correspondences", "array lengths disagree")
        for name, arr in (("world", world), ("image", image), ("ids", ids), ("corner_index", cidx)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_points(cls, world: np.ndarray, image: np.ndarray) -> Correspondences:
        n = len(world)
        return cls(world, image, np.full(n, -1), np.arange(n))

    def __len__(self) -> int:
        return len(self.world)

    def subset(self, mask: np.ndarray) -> Correspondences:
        return Correspondences(self.world[mask], self.image[mask], self.ids[mask], self.corner_index[mask])

    def with_image(self, image: np.ndarray) -> Correspondences:
        return Correspondences(self.world, image, self.ids, self.corner_index)


def build_correspondences(detections: Sequence[MarkerDetection], spec: BoardSpec) -> Correspondences:
    """Pair every detected corner with its board coordinate.

    Detections whose id is not on the board are ignored, as are repeated ids
    after the first.
    """
    on_board = set(spec.marker_ids)
    world, image, ids, cidx = [], [], [], []
    seen: set[int] = set()
    for det in detections:
        if det.id not in on_board or det.id in seen:
            continue
        seen.add(det.id)
        world.append(corner_coords(spec, det.id))
        image.append(np.asarray(det.corners_px, dtype=float))
        ids.extend([det.id] * 4)
        cidx.extend(range(4))
    if len(seen) < MIN_MARKERS:
        raise CassError(
            "insufficient-correspondences",
            f"{len(seen)} board marker(s) detected, need at least {MIN_MARKERS}",
        )
    return Correspondences(np.concatenate(world), np.concatenate(image), np.array(ids), np.array(cidx))


def _normalizer(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _spread(pts: np.ndarray) -> float:
    """Ratio of the smaller to the larger singular value of the centred cloud."""
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return float(sv[-1] / sv[0]) if sv[0] > 0 else 0.0


def dlt_homography(world: np.ndarray, image: np.ndarray) -> np.ndarray:
    """Normalised DLT; returns a raw 3x3 matrix mapping world to image."""
    world = np.asarray(world, dtype=float)
    image = np.asarray(image, dtype=float)
    if len(world) < 4:
        raise CassError("degenerate-configuration", f"need 4 correspondences, got {len(world)}")
    if _spread(world) < 1e-9 or _spread(image) < 1e-9:
        raise CassError("degenerate-configuration", "points are collinear")
    tw, ti = _normalizer(world), _normalizer(image)
    xw = apply_homography(tw, world)
    xi = apply_homography(ti, image)
    n = len(world)
    a = np.zeros((2 * n, 9))
    x, y = xw[:, 0], xw[:, 1]
    u, v = xi[:, 0], xi[:, 1]
    one = np.ones(n)
    a[0::2, 0:3] = np.column_stack([x, y, one])
    a[0::2, 6:9] = -u[:, None] * np.column_stack([x, y, one])
    a[1::2, 3:6] = np.column_stack([x, y, one])
    a[1::2, 6:9] = -v[:, None] * np.column_stack([x, y, one])
    _, sv, vt = np.linalg.svd(a)
    if sv[-2] < 1e-10 * sv[0]:
        raise CassError("degenerate-configuration", "design matrix is rank deficient")
    g = vt[-1].reshape(3, 3)
    h = np.linalg.inv(ti) @ g @ tw
    if abs(np.linalg.det(h / np.linalg.norm(h))) < 1e-15:
        raise CassError("degenerate-configuration", "singular homography")
    return h


def estimate_homography_dlt(corr: Correspondences) -> PlaneHomography:
    return PlaneHomography(dlt_homography(corr.world, corr.image))


def reprojection_errors(h: np.ndarray | PlaneHomography, world: np.ndarray, image: np.ndarray) -> np.ndarray:
    hm = h.h if isinstance(h, PlaneHomography) else h
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.linalg.norm(apply_homography(hm, world) - image, axis=1)
    return np.where(np.isfinite(err), err, np.inf)


def _ransac_iterations(inlier_ratio: float, confidence: float) -> float:
    if inlier_ratio >= 1.0:
        return 0.0
    p_good = inlier_ratio**4
    if p_good <= 0.0:
        return math.inf
    return math.log(1.0 - confidence) / math.log(1.0 - p_good)


def estimate_homography_ransac(
    corr: Correspondences,
    threshold_px: float = RANSAC_THRESHOLD_PX,
    confidence: float = RANSAC_CONFIDENCE,
    seed: int = 0,
    max_iterations: int = 5000,
) -> tuple[PlaneHomography, np.ndarray]:
    """Four-point RANSAC with an adaptive iteration count.

    The winning consensus set is re-fitted by DLT and re-scored once.
    Returns the homography and a boolean inlier mask.
    """
    if not 0 < confidence < 1:
        raise CassError("invalid-parameters", "confidence must lie in (0, 1)")
    n = len(corr)
    if n < 4:
        raise CassError("no-consensus", f"{n} correspondences, need 4")
    rng = np.random.default_rng(seed)
    best_mask = np.zeros(n, dtype=bool)
    best_count = 0
    best_err = math.inf
    needed = float(max_iterations)
    it = 0
    while it < min(needed, max_iterations):
        it += 1
        idx = rng.choice(n, 4, replace=False)
        try:
            h = dlt_homography(corr.world[idx], corr.image[idx])
        except CassError:
            continue
        err = reprojection_errors(h, corr.world, corr.image)
        mask = err < threshold_px
        count = int(mask.sum())
        total = float(err[mask].sum())
        if count > best_count or (count == best_count and count > 0 and total < best_err):
            best_mask, best_count, best_err = mask, count, total
            needed = _ransac_iterations(count / n, confidence)

    if best_count < 4:
        raise CassError("no-consensus", f"best consensus has {best_count} points")

    mask = best_mask
    for _ in range(2):
        h = dlt_homography(corr.world[mask], corr.image[mask])
        new_mask = reprojection_errors(h, corr.world, corr.image) < threshold_px
        if new_mask.sum() < 4 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    logger.debug("ransac: %d iterations, %d/%d inliers", it, int(mask.sum()), n)
    return PlaneHomography(h), mask


class ReprojectionModel:
    """Residuals and analytic Jacobian of the single-view camera model.

    Parameter vector: ``[f, k1, k2, g00, g01, g02, g10, g11, g12, g20, g21]``
    where ``H = Ti^-1 G Tw`` with fixed normalising similarities ``Tw`` (world)
    and ``Ti`` (image) and ``G[2, 2] = 1``.  The principal point is fixed.
    """

    n_params = 11

    def __init__(self, world: np.ndarray, image: np.ndarray, cx: float, cy: float) -> None:
        self.world = np.asarray(world, dtype=float)
        self.image = np.asarray(image, dtype=float)
        self.cx, self.cy = float(cx), float(cy)
        self.tw = _normalizer(self.world)
        self.ti = _normalizer(self.image)
        self.wn = np.column_stack([apply_homography(self.tw, self.world), np.ones(len(self.world))])
        self._scale = self.ti[0, 0]
        self._mx = -self.ti[0, 2] / self._scale
        self._my = -self.ti[1, 2] / self._scale

    def pack(self, intr: CameraIntrinsics, h: PlaneHomography | np.ndarray) -> np.ndarray:
        hm = h.h if isinstance(h, PlaneHomography) else np.asarray(h, dtype=float)
        g = self.ti @ hm @ np.linalg.inv(self.tw)
        g = g / g[2, 2]
        return np.concatenate([[intr.f, intr.k1, intr.k2], g.ravel()[:8]])

    def unpack(self, theta: np.ndarray) -> tuple[CameraIntrinsics, PlaneHomography]:
        f, k1, k2 = (float(t) for t in theta[:3])
        g = np.append(theta[3:], 1.0).reshape(3, 3)
        h = np.linalg.inv(self.ti) @ g @ self.tw
        return CameraIntrinsics(f, f, self.cx, self.cy, k1, k2), PlaneHomography(h)

    def _forward(self, theta: np.ndarray):
        f, k1, k2 = theta[:3]
        g = np.append(theta[3:], 1.0).reshape(3, 3)
        q = self.wn @ g.T
        c = q[:, 2]
        u = self._mx + q[:, 0] / (self._scale * c)
        v = self._my + q[:, 1] / (self._scale * c)
        du, dv = u - self.cx, v - self.cy
        r2 = (du * du + dv * dv) / (f * f)
        s = 1.0 + k1 * r2 + k2 * r2 * r2
        return f, k1, k2, c, u, v, du, dv, r2, s

    def predict(self, theta: np.ndarray) -> np.ndarray:
        *_, du, dv, _, s = self._forward(theta)
        return np.column_stack([self.cx + du * s, self.cy + dv * s])

    def residuals(self, theta: np.ndarray) -> np.ndarray:
        return (self.predict(theta) - self.image).ravel()

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        f, k1, k2, c, u, v, du, dv, r2, s = self._forward(theta)
        n = len(u)
        ds = k1 + 2.0 * k2 * r2  # d s / d r2
        # d(distorted)/d(undistorted)
        dud_du = s + du * ds * 2.0 * du / (f * f)
        dud_dv = du * ds * 2.0 * dv / (f * f)
        dvd_du = dv * ds * 2.0 * du / (f * f)
        dvd_dv = s + dv * ds * 2.0 * dv / (f * f)

        # d(undistorted)/d(g): 8 free entries of G
        du_dg = np.zeros((n, 8))
        dv_dg = np.zeros((n, 8))
        inv = 1.0 / (self._scale * c)
        du_dg[:, 0:3] = self.wn * inv[:, None]
        dv_dg[:, 3:6] = self.wn * inv[:, None]
        du_dg[:, 6:8] = -((u - self._mx) / c)[:, None] * self.wn[:, :2]
        dv_dg[:, 6:8] = -((v - self._my) / c)[:, None] * self.wn[:, :2]

        jac = np.empty((2 * n, self.n_params))
        jac[0::2, 0] = du * ds * (-2.0 * r2 / f)
        jac[1::2, 0] = dv * ds * (-2.0 * r2 / f)
        jac[0::2, 1] = du * r2
        jac[1::2, 1] = dv * r2
        jac[0::2, 2] = du * r2 * r2
        jac[1::2, 2] = dv * r2 * r2
        jac[0::2, 3:] = dud_du[:, None] * du_dg + dud_dv[:, None] * dv_dg
        jac[1::2, 3:] = dvd_du[:, None] * du_dg + dvd_dv[:, None] * dv_dg
        return jac


def _rms(residuals: np.ndarray) -> float:
    return math.sqrt(float(residuals @ residuals) / max(1, len(residuals) // 2))


def refine_calibration(
    corr: Correspondences,
    intrinsics0: CameraIntrinsics,
    h0: PlaneHomography,
    *,
    max_iterations: int = LM_MAX_ITERATIONS,
    callback: Callable[[int, float, bool], None] | None = None,
) -> tuple[CameraIntrinsics, PlaneHomography, float]:
    """Levenberg-Marquardt on the sum of squared reprojection errors.

    Refines the shared focal length, k1, k2 and the homography; ``cx, cy``
    stay as given.  ``callback(iteration, cost, accepted)`` is invoked for
    every trial step.  Returns the refined intrinsics, homography and the
    RMS reprojection error in pixels.
    """
    if len(corr) < 8:
        raise CassError("insufficient-correspondences", f"{len(corr)} correspondences, need 8")
    model = ReprojectionModel(corr.world, corr.image, intrinsics0.cx, intrinsics0.cy)
    theta = model.pack(intrinsics0, h0)
    r = model.residuals(theta)
    cost = float(r @ r)
    if not math.isfinite(cost):
        raise CassError("diverged", "initial reprojection cost is not finite")

    lam = 1e-3
    eye = np.eye(model.n_params)
    for it in range(max_iterations):
        if cost == 0.0:
            break
        jac = model.jacobian(theta)
        a = np.vstack([jac, math.sqrt(lam) * eye])
        b = np.concatenate([-r, np.zeros(model.n_params)])
        delta = np.linalg.lstsq(a, b, rcond=None)[0]
        trial = theta + delta
        with np.errstate(all="ignore"):
            r_new = model.residuals(trial)
            cost_new = float(r_new @ r_new)
        accepted = math.isfinite(cost_new) and cost_new < cost
        if callback is not None:
            callback(it, cost_new if accepted else cost, accepted)
        if accepted:
            rel = (cost - cost_new) / cost
            theta, r, cost = trial, r_new, cost_new
            lam = max(lam / 10.0, 1e-15)
            if rel < LM_REL_TOL:
                break
        else:
            lam *= 10.0
            if lam > 1e16:
                break

    intr, h = model.unpack(theta)
    if not intr.is_finite():
        raise CassError("diverged", "refined parameters are not finite")
    return intr, h, _rms(r)


@dataclass
class CalibrationResult:
    intrinsics: CameraIntrinsics
    homography: PlaneHomography
    rms_px: float
    inliers: np.ndarray
    correspondences: Correspondences
    markers: int
    warnings: list[str] = field(default_factory=list)

    @property
    def inlier_count(self) -> int:
        return int(self.inliers.sum())

    def report(self) -> str:
        lines = [
            f"f_px {self.intrinsics.f:.6f}",
            f"cx_px {self.intrinsics.cx:.3f}",
            f"cy_px {self.intrinsics.cy:.3f}",
            f"k1 {self.intrinsics.k1:.8f}",
            f"k2 {self.intrinsics.k2:.8f}",
            f"rms_px {self.rms_px:.6f}",
            f"markers {self.markers}",
            f"inliers {self.inlier_count}/{len(self.inliers)}",
        ]
        lines += [f"warning {w}" for w in self.warnings]
        return "\n".join(lines) + "\n"


def coverage_warnings(detections: Sequence[MarkerDetection], width: int, height: int) -> list[str]:
    """Warn when detected markers leave an image quadrant empty."""
    quads = set()
    for det in detections:
        cx, cy = np.asarray(det.corners_px).mean(axis=0)
        quads.add((cx >= width / 2, cy >= height / 2))
    if len(quads) < 4:
        return [f"markers cover {len(quads)} of 4 image quadrants"]
    return []


def calibrate_image(
    detections: Sequence[MarkerDetection],
    spec: BoardSpec,
    intrinsics0: CameraIntrinsics,
    image_size: tuple[int, int] | None = None,
    threshold_px: float = RANSAC_THRESHOLD_PX,
    confidence: float = RANSAC_CONFIDENCE,
    seed: int = 0,
    max_rounds: int = 5,
) -> CalibrationResult:
    """Robust fit then joint refinement, alternated until the inlier set settles.

    Distortion is unknown at first, so RANSAC runs on corners undistorted
    with the current estimate; corners far from the centre that were
    rejected in early rounds re-enter once k1, k2 are known.
    """
    corr = build_correspondences(detections, spec)
    intr = intrinsics0
    mask = None
    h = None
    rms = math.inf
    for rnd in range(max_rounds):
        und = corr.with_image(undistort_points(corr.image, intr))
        h_lin, new_mask = estimate_homography_ransac(und, threshold_px, confidence, seed)
        if new_mask.sum() < 8:
            raise CassError("insufficient-correspondences", f"{int(new_mask.sum())} inliers, need 8")
        if mask is not None and np.array_equal(new_mask, mask):
            break
        mask = new_mask
        intr, h, rms = refine_calibration(corr.subset(mask), intr, h_lin)
        # full-model residuals decide membership for the next round
        err = np.linalg.norm(project(h, intr, corr.world) - corr.image, axis=1)
        full_mask = err < threshold_px
        logger.debug("round %d: rms %.4f px, %d inliers", rnd, rms, int(full_mask.sum()))
        if np.array_equal(full_mask, mask):
            break
    assert h is not None and mask is not None

    warnings = []
    if image_size is not None:
        warnings = coverage_warnings(detections, *image_size)
    return CalibrationResult(
        intrinsics=intr,
        homography=h,
        rms_px=rms,
        inliers=mask,
        correspondences=corr,
        markers=len(set(corr.ids.tolist())),
        warnings=warnings,
    )
