"""Square fiducial detection.

Candidates come from contours of adaptive-mean thresholded images at a few
window sizes.  Each convex quadrilateral is unwarped to the marker's cell
grid, cells are read by majority vote, and the data bits are matched
against the dictionary in all four orientations.  Surviving corners are
refined to sub-pixel accuracy by fitting lines to the two border edges
that meet at each corner and intersecting them.  ``refine_corner`` offers
the gradient-orthogonality refinement for saddle (chessboard) corners.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import cv2
import numpy as np

from .calib import dlt_homography
from .camera import apply_homography
from .errors import CassError
from .pattern import MarkerDictionary
from .raster import as_raster, to_gray
from .rectify import sample_bilinear

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectParams:
    threshold_windows: tuple[int, ...] = (15, 35, 75)
    threshold_offset: float = 7.0
    approx_epsilon: float = 0.03  # fraction of contour perimeter
    min_perimeter_px: float = 40.0
    max_correction: int | None = None  # None: floor((min_distance - 1) / 2)
    cell_margin: float = 0.2  # sample the central 1 - 2 * margin of each cell
    samples_per_cell: int = 5
    min_contrast: float = 20.0  # grey levels between black and white cells
    refine_corners: bool = True


@dataclass(frozen=True)
class MarkerDetection:
    id: int
    corners_px: np.ndarray  # (4, 2), clockwise from the marker's top-left
    decode_rotation: int
    bit_errors: int = 0

    @property
    def center(self) -> np.ndarray:
        return self.corners_px.mean(axis=0)


def _signed_area(quad: np.ndarray) -> float:
    x, y = quad[:, 0], quad[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _candidate_quads(gray8: np.ndarray, params: DetectParams) -> list[np.ndarray]:
    h, w = gray8.shape
    quads = []
    for win in params.threshold_windows:
        win = int(win) | 1
        binary = cv2.adaptiveThreshold(
            gray8, 255, cv2.ADAPTIVE_THRESH_MEAN_C, cv2.THRESH_BINARY_INV, win, params.threshold_offset
        )
        contours, _ = cv2.findContours(binary, cv2.RETR_LIST, cv2.CHAIN_APPROX_NONE)
        for contour in contours:
            perimeter = cv2.arcLength(contour, True)
            if perimeter < params.min_perimeter_px:
                continue
            approx = cv2.approxPolyDP(contour, params.approx_epsilon * perimeter, True)
            if len(approx) != 4 or not cv2.isContourConvex(approx):
                continue
            quad = approx.reshape(4, 2).astype(np.float64)
            if quad.min() < 1 or np.any(quad[:, 0] > w - 2) or np.any(quad[:, 1] > h - 2):
                continue
            quad += 0.5  # pixel index -> continuous coordinate of its centre
            area = _signed_area(quad)
            if abs(area) < (params.min_perimeter_px / 4) ** 2:
                continue
            if area < 0:
                quad = quad[::-1].copy()
            quads.append(quad)
    return quads


def _read_cells(gray: np.ndarray, quad: np.ndarray, cells: int, params: DetectParams) -> tuple[np.ndarray, float] | None:
    """Majority-vote cell colours (1 = white) and the black/white contrast."""
    grid = np.array([[0, 0], [cells, 0], [cells, cells], [0, cells]], dtype=float)
    try:
        hmat = dlt_homography(grid, quad)
    except CassError:
        return None
    k = params.samples_per_cell
    offs = np.linspace(params.cell_margin, 1 - params.cell_margin, k)
    ci = np.arange(cells)
    # (cells, cells, k, k) sample positions in cell units
    xs = ci[None, :, None, None] + offs[None, None, None, :]
    ys = ci[:, None, None, None] + offs[None, None, :, None]
    xs, ys = np.broadcast_arrays(xs, ys)
    pts = apply_homography(hmat, np.stack([xs, ys], axis=-1))
    vals = sample_bilinear(gray, pts[..., 0] - 0.5, pts[..., 1] - 0.5).reshape(cells, cells, k * k)
    vals8 = np.clip(np.rint(vals), 0, 255).astype(np.uint8).reshape(1, -1)
    thr, _ = cv2.threshold(vals8, 0, 255, cv2.THRESH_BINARY + cv2.THRESH_OTSU)
    white = vals > thr
    bright = vals[white]
    dark = vals[~white]
    if bright.size == 0 or dark.size == 0:
        return None
    bits = (white.mean(axis=2) > 0.5).astype(np.uint8)
    return bits, float(bright.mean() - dark.mean())


def _match(data: np.ndarray, codes: np.ndarray) -> tuple[int, int, int]:
    """Best ``(id, rotation, distance)`` over all codes and quarter turns."""
    best = (-1, 0, data.size + 1)
    for k in range(4):
        dist = (codes != np.rot90(data, k)[None]).reshape(len(codes), -1).sum(axis=1)
        i = int(np.argmin(dist))
        if dist[i] < best[2]:
            best = (i, k, int(dist[i]))
    return best


def refine_corner(image: np.ndarray, approx: tuple[float, float] | np.ndarray, window: int) -> np.ndarray:
    """Sub-pixel corner by the gradient-orthogonality criterion.

    Finds ``q`` minimising ``sum w_p (g_p . (q - p))^2`` over pixels ``p`` in
    a ``(2 * window + 1)``-wide box, where ``g_p`` is the image gradient and
    ``w_p`` a Gaussian window divided by ``|g_p|``.  A
    flat or single-edge neighbourhood leaves the system singular and
    ``approx`` is returned unchanged, as it is when the solution would move
    more than ``window / 2`` pixels.
    """
    if window < 2:
        raise CassError("invalid-parameters", "window must be >= 2")
    gray = image if image.dtype == np.float64 and image.ndim == 2 else to_gray(image)
    h, w = gray.shape
    approx = np.asarray(approx, dtype=float)
    pad = window + 2
    if not (pad <= approx[0] <= w - pad and pad <= approx[1] <= h - pad):
        raise CassError("window-out-of-bounds", f"corner {approx.tolist()} too close to the border")

    x0 = int(np.floor(approx[0])) - pad
    y0 = int(np.floor(approx[1])) - pad
    patch = gray[y0 : y0 + 2 * pad + 1, x0 : x0 + 2 * pad + 1]
    gy, gx = np.gradient(patch)
    cx = x0 + np.arange(patch.shape[1]) + 0.5
    cy = y0 + np.arange(patch.shape[0]) + 0.5
    px, py = np.meshgrid(cx, cy)
    sigma = max(window / 1.5, 1.0)

    q = approx.copy()
    for _ in range(30):
        sel = (np.abs(px - q[0]) <= window) & (np.abs(py - q[1]) <= window)
        wgt = np.exp(-((px - q[0]) ** 2 + (py - q[1]) ** 2) / (2 * sigma * sigma))[sel]
        g = np.stack([gx[sel], gy[sel]], axis=1)
        p = np.stack([px[sel], py[sel]], axis=1)
        # weight by |g| rather than |g|^2: squared weights skew the centroid
        # of an edge's gradient profile whenever the edge sits off-centre
        mag = np.hypot(g[:, 0], g[:, 1])
        wgt = np.where(mag > 0, wgt / np.maximum(mag, 1e-12), 0.0)
        gg = g[:, :, None] * g[:, None, :] * wgt[:, None, None]
        a = gg.sum(axis=0)
        b = np.einsum("nij,nj->i", gg, p)
        eig = np.linalg.eigvalsh(a)
        if eig[1] <= 0 or eig[0] < 1e-6 * eig[1]:
            return approx
        q_new = np.linalg.solve(a, b)
        step = np.abs(q_new - q).max()
        q = q_new
        if np.abs(q - approx).max() > window / 2:
            return approx
        if step < 1e-4:
            break
    return q


def _edge_points(gray: np.ndarray, start: np.ndarray, d: np.ndarray, ts: np.ndarray, half_width: float) -> np.ndarray:
    """Sub-pixel positions of a light-to-dark edge crossed along the inward normal.

    ``start + t * d`` runs along the edge; each profile spans ``half_width``
    either side and the edge sits at the centroid of the falling gradient.
    """
    nrm = np.array([-d[1], d[0]])  # inward for clockwise quads
    ss = np.arange(-half_width, half_width + 1e-9, 0.25)
    base = start[None, :] + ts[:, None] * d[None, :]
    pts = base[:, None, :] + ss[None, :, None] * nrm[None, None, :]
    prof = sample_bilinear(gray, pts[..., 0] - 0.5, pts[..., 1] - 0.5)
    fall = np.clip(-np.gradient(prof, axis=1), 0.0, None)
    peak = fall.max(axis=1, keepdims=True)
    fall = np.where(fall >= 0.2 * peak, fall, 0.0)
    tot = fall.sum(axis=1)
    ok = (tot > 0) & (peak[:, 0] > 1.0)
    # drop profiles whose edge sits against the window limit
    s_edge = np.where(ok, (fall * ss).sum(axis=1) / np.where(ok, tot, 1.0), 0.0)
    ok &= np.abs(s_edge) < half_width - 0.5
    return base[ok] + s_edge[ok, None] * nrm[None, :]


def _fit_line(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    if len(pts) < 3:
        return None
    c = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - c)
    return c, vt[0]


def _intersect(l1: tuple[np.ndarray, np.ndarray], l2: tuple[np.ndarray, np.ndarray]) -> np.ndarray | None:
    (p1, d1), (p2, d2) = l1, l2
    a = np.column_stack([d1, -d2])
    if abs(np.linalg.det(a)) < 1e-6:
        return None
    t = np.linalg.solve(a, p2 - p1)
    return p1 + t[0] * d1


def refine_marker_corners(gray: np.ndarray, quad: np.ndarray, cells: int) -> np.ndarray:
    """Outer corners as intersections of edge lines fitted close to each corner.

    Only the first stretch of each side next to a corner is used, so lens
    curvature along the full side does not bend the fit.
    """
    out = quad.copy()
    h, w = gray.shape
    lines_start: list = []
    lines_end: list = []
    for i in range(4):
        p, q = quad[i], quad[(i + 1) % 4]
        length = float(np.linalg.norm(q - p))
        d = (q - p) / length
        module = length / cells
        half = max(2.0, 0.5 * module)
        a = max(3.0, 0.2 * module)
        b = min(max(a + 4.0, 1.5 * module), 0.45 * length)
        ts = np.arange(a, b, 0.5)
        lines_start.append(_fit_line(_edge_points(gray, p, d, ts, half)))
        lines_end.append(_fit_line(_edge_points(gray, p, d, length - ts, half)))
    for i in range(4):
        prev_line = lines_end[(i - 1) % 4]
        next_line = lines_start[i]
        if prev_line is None or next_line is None:
            continue
        c = _intersect(prev_line, next_line)
        if c is None or np.linalg.norm(c - quad[i]) > 3.0:
            continue
        if not (0 <= c[0] <= w and 0 <= c[1] <= h):
            continue
        out[i] = c
    return out


def detect_markers(
    image: np.ndarray, dictionary: MarkerDictionary, params: DetectParams | None = None
) -> list[MarkerDetection]:
    """All dictionary markers visible in ``image``, one per id, sorted by id."""
    params = params or DetectParams()
    raster = as_raster(image)
    gray = to_gray(raster)
    gray8 = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    n = dictionary.bit_size
    cells = n + 2
    codes = dictionary.as_array()
    max_corr = params.max_correction
    if max_corr is None:
        max_corr = (dictionary.min_distance - 1) // 2

    found: list[tuple[MarkerDetection, float]] = []
    for quad in _candidate_quads(gray8, params):
        read = _read_cells(gray, quad, cells, params)
        if read is None:
            continue
        bits, contrast = read
        if contrast < params.min_contrast:
            continue
        ring = np.concatenate([bits[0], bits[-1], bits[1:-1, 0], bits[1:-1, -1]])
        if ring.any():
            continue
        mid, rot, dist = _match(bits[1:-1, 1:-1], codes)
        if dist > max_corr:
            continue
        corners = np.roll(quad, -rot, axis=0)
        found.append((MarkerDetection(mid, corners, rot, dist), abs(_signed_area(quad))))

    # one detection per id: fewest bit errors, then the largest quad
    best: dict[int, tuple[MarkerDetection, float]] = {}
    for det, area in found:
        cur = best.get(det.id)
        if cur is None or (det.bit_errors, -area) < (cur[0].bit_errors, -cur[1]):
            best[det.id] = (det, area)

    out = []
    for mid in sorted(best):
        det, area = best[mid]
        corners = det.corners_px
        if params.refine_corners:
            corners = refine_marker_corners(gray, corners, cells)
        corners.setflags(write=False)
        out.append(MarkerDetection(det.id, corners, det.decode_rotation, det.bit_errors))
    logger.debug("detected %d markers from %d decoded candidates", len(out), len(found))
    return out


def draw_detections(image: np.ndarray, detections: list[MarkerDetection]) -> np.ndarray:
    """RGB copy of ``image`` with marker outlines, first corners and ids drawn."""
    raster = as_raster(image)
    rgb = np.repeat(raster[..., None], 3, axis=2) if raster.ndim == 2 else raster.copy()
    rgb = np.ascontiguousarray(rgb)
    scale = max(1, int(round(max(rgb.shape[:2]) / 1000)))
    for det in detections:
        pts = np.rint(det.corners_px - 0.5).astype(np.int32)
        cv2.polylines(rgb, [pts.reshape(-1, 1, 2)], True, (0, 200, 0), scale)
        cv2.circle(rgb, tuple(int(v) for v in pts[0]), 3 * scale, (255, 0, 0), -1)
        c = tuple(int(v) for v in np.rint(det.center))
        cv2.putText(rgb, str(det.id), c, cv2.FONT_HERSHEY_SIMPLEX, 0.6 * scale, (0, 0, 255), scale)
    return rgb
