"""Synthetic photographs of the board with exactly known geometry.

Image positions are pulled back through the lens model and the inverse
homography to board millimetres, where the ideal board is point sampled
several times per pixel.  No intermediate raster is warped, so the only
approximation in the oracle is the sampling itself.
"""

from __future__ import annotations

import io
import json
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .camera import (
    CameraIntrinsics,
    PlaneHomography,
    apply_homography,
    homography_from_pose,
    project,
    undistort_points,
)
from .errors import CassError
from .exif import ExifRecord, insert_exif
from .pattern import BoardSpec, MarkerDictionary, corner_coords, sample_board, save_board
from .raster import write_png


@dataclass(frozen=True)
class SceneRect:
    """Flat coloured rectangle lying on the board, axis-aligned in board mm."""

    x_mm: float
    y_mm: float
    width_mm: float
    height_mm: float
    color: tuple[int, int, int] = (220, 40, 40)


@dataclass(frozen=True)
class SceneTruth:
    h_true: PlaneHomography
    intrinsics_true: CameraIntrinsics
    noise_sigma: float = 0.0  # in units of full scale (1.0 == 255 levels)
    blur_radius: float = 0.0  # box blur half-width in pixels
    seed: int = 0
    objects: tuple[SceneRect, ...] = field(default=())

    def validate(self) -> None:
        intr = self.intrinsics_true
        if not intr.is_finite() or intr.fx <= 0 or intr.fy <= 0:
            raise CassError("invalid-truth", "intrinsics must be finite with positive focal length")
        if not (self.noise_sigma >= 0 and math.isfinite(self.noise_sigma)):
            raise CassError("invalid-truth", "noise_sigma must be >= 0")
        if not (self.blur_radius >= 0 and math.isfinite(self.blur_radius)):
            raise CassError("invalid-truth", "blur_radius must be >= 0")
        if abs(np.linalg.det(self.h_true.h)) < 1e-15:
            raise CassError("invalid-truth", "h_true is not invertible")

    def to_json(self) -> dict:
        intr = self.intrinsics_true
        return {
            "h_true": self.h_true.h.tolist(),
            "intrinsics_true": {
                "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "k1": intr.k1, "k2": intr.k2,
            },
            "noise_sigma": self.noise_sigma,
            "blur_radius": self.blur_radius,
            "seed": self.seed,
            "objects": [
                {"x_mm": o.x_mm, "y_mm": o.y_mm, "width_mm": o.width_mm, "height_mm": o.height_mm,
                 "color": list(o.color)}
                for o in self.objects
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> SceneTruth:
        try:
            return cls(
                h_true=PlaneHomography(np.array(doc["h_true"], dtype=float)),
                intrinsics_true=CameraIntrinsics(**{k: float(v) for k, v in doc["intrinsics_true"].items()}),
                noise_sigma=float(doc.get("noise_sigma", 0.0)),
                blur_radius=float(doc.get("blur_radius", 0.0)),
                seed=int(doc.get("seed", 0)),
                objects=tuple(
                    SceneRect(o["x_mm"], o["y_mm"], o["width_mm"], o["height_mm"], tuple(o["color"]))
                    for o in doc.get("objects", [])
                ),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CassError("invalid-truth", f"bad truth document: {exc}") from exc


def _pixel_corner_world(truth: SceneTruth, out_w: int, out_h: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact board mm at every pixel corner, and a mask of corners off the board plane."""
    xs = np.arange(out_w + 1, dtype=float)
    ys = np.arange(out_h + 1, dtype=float)
    und = undistort_points(np.stack(np.meshgrid(xs, ys), axis=-1), truth.intrinsics_true)
    hinv = truth.h_true.inverse()
    with np.errstate(divide="ignore", invalid="ignore"):
        world = apply_homography(hinv, und)
        den = hinv[2, 0] * und[..., 0] + hinv[2, 1] * und[..., 1] + hinv[2, 2]
    # beyond the horizon of the board plane
    bad = ~np.isfinite(world).all(axis=-1) | (den <= 0)
    return np.where(bad[..., None], 0.0, world), bad


def _scene_values(
    dictionary: MarkerDictionary,
    spec: BoardSpec,
    truth: SceneTruth,
    wx: np.ndarray,
    wy: np.ndarray,
    background: int,
) -> np.ndarray:
    """Ideal scene colour at board positions, float64, 1 or 3 channels."""
    gray = sample_board(dictionary, spec, wx, wy, background=background)
    if not truth.objects:
        return gray[..., None].astype(np.float64)
    img = np.repeat(gray[..., None], 3, axis=-1).astype(np.float64)
    for obj in truth.objects:
        inside = (wx >= obj.x_mm) & (wx < obj.x_mm + obj.width_mm) & (wy >= obj.y_mm) & (wy < obj.y_mm + obj.height_mm)
        img[inside] = np.asarray(obj.color, dtype=np.float64)
    return img


def render_scene(
    dictionary: MarkerDictionary,
    spec: BoardSpec,
    truth: SceneTruth,
    out_w: int,
    out_h: int,
    background: int = 128,
    supersample: int = 4,
    block_rows: int = 64,
) -> np.ndarray:
    """Photograph of the board under ``truth``; RGB when the scene has objects.

    Each pixel averages ``supersample**2`` point samples of the ideal scene
    on a regular sub-grid.  The lens and homography are inverted exactly at
    pixel corners; sub-sample positions inside a pixel are interpolated
    bilinearly from its four corners.
    """
    truth.validate()
    if out_w < 1 or out_h < 1 or supersample < 1:
        raise CassError("invalid-truth", "output size and supersample must be positive")
    corner_world, off_plane = _pixel_corner_world(truth, out_w, out_h)
    channels = 3 if truth.objects else 1
    img = np.zeros((out_h, out_w, channels), dtype=np.float64)
    sub = (np.arange(supersample) + 0.5) / supersample
    fy = sub[None, :, None, None, None]
    fx = sub[None, None, None, :, None]
    for start in range(0, out_h, block_rows):
        stop = min(start + block_rows, out_h)
        c00 = corner_world[start:stop, :-1][:, None, :, None, :]
        c01 = corner_world[start:stop, 1:][:, None, :, None, :]
        c10 = corner_world[start + 1 : stop + 1, :-1][:, None, :, None, :]
        c11 = corner_world[start + 1 : stop + 1, 1:][:, None, :, None, :]
        # (rows, sub_y, cols, sub_x, 2)
        world = (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy
        bad = (
            off_plane[start:stop, :-1] | off_plane[start:stop, 1:]
            | off_plane[start + 1 : stop + 1, :-1] | off_plane[start + 1 : stop + 1, 1:]
        )
        wx = np.where(bad[:, None, :, None], -1e9, world[..., 0])
        vals = _scene_values(dictionary, spec, truth, wx, world[..., 1], background)
        img[start:stop] = vals.mean(axis=(1, 3))
    if channels == 1:
        img = img[..., 0]

    if truth.noise_sigma > 0:
        rng = np.random.default_rng(truth.seed)
        img = img + rng.normal(0.0, truth.noise_sigma * 255.0, size=img.shape)
    radius = int(round(truth.blur_radius))
    if radius > 0:
        k = 2 * radius + 1
        img = cv2.blur(img, (k, k), borderType=cv2.BORDER_REFLECT)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def expected_corner(truth: SceneTruth, spec: BoardSpec, marker_id: int, corner: int) -> np.ndarray:
    """Exact image position of one marker corner, ``corner`` in 0..3 clockwise from top-left."""
    world = corner_coords(spec, marker_id)[corner]
    return project(truth.h_true, truth.intrinsics_true, world[None])[0]


def oblique_truth(
    spec: BoardSpec,
    out_w: int,
    out_h: int,
    tilt_deg: float = 0.0,
    roll_deg: float = 0.0,
    f_px: float | None = None,
    k1: float = 0.0,
    k2: float = 0.0,
    noise_sigma: float = 0.0,
    blur_radius: float = 1.0,
    seed: int = 0,
    fill: float = 0.9,
    objects: tuple[SceneRect, ...] = (),
) -> SceneTruth:
    """Camera looking at the board centre with the given obliquity.

    ``tilt_deg`` is the angle between the optical axis and the board normal
    (rotation about the board X axis); ``roll_deg`` spins the board in the
    image.  The distance is chosen so the distorted board just fits inside
    ``fill`` of the frame.
    """
    f_px = f_px or 1.2 * max(out_w, out_h)
    cx, cy = out_w / 2.0, out_h / 2.0
    intr = CameraIntrinsics(f_px, f_px, cx, cy, k1, k2)
    t, r = math.radians(tilt_deg), math.radians(roll_deg)
    rx = np.array([[1, 0, 0], [0, math.cos(t), -math.sin(t)], [0, math.sin(t), math.cos(t)]])
    rz = np.array([[math.cos(r), -math.sin(r), 0], [math.sin(r), math.cos(r), 0], [0, 0, 1]])
    rot = rx @ rz
    rvec = cv2.Rodrigues(rot)[0].ravel()
    centre = np.array([spec.board_width_mm / 2, spec.board_height_mm / 2, 0.0])
    sheet = np.array(
        [[0, 0], [spec.board_width_mm, 0], [spec.board_width_mm, spec.board_height_mm], [0, spec.board_height_mm]]
    )
    edges = np.concatenate([np.linspace(sheet[i], sheet[(i + 1) % 4], 20) for i in range(4)])

    dist = f_px * max(spec.board_width_mm / (fill * out_w), spec.board_height_mm / (fill * out_h))
    for _ in range(200):
        tvec = -rot @ centre + np.array([0.0, 0.0, dist])
        h = homography_from_pose(f_px, cx, cy, rvec, tvec)
        pts = project(h, intr, edges)
        lo = np.array([(1 - fill) / 2 * out_w, (1 - fill) / 2 * out_h])
        hi = np.array([out_w, out_h]) - lo
        if np.all(pts >= lo) and np.all(pts <= hi):
            break
        dist *= 1.03
    return SceneTruth(PlaneHomography(h), intr, noise_sigma, blur_radius, seed, tuple(objects))


def write_scene(
    path: str | Path,
    image: np.ndarray,
    truth: SceneTruth,
    sensor_width_mm: float,
    jpeg_quality: int = 95,
) -> None:
    """Save a rendered scene as PNG, or as JPEG carrying an EXIF focal length.

    The JPEG's EXIF focal length is what the true focal length in pixels
    corresponds to on a sensor ``sensor_width_mm`` wide (landscape rasters).
    """
    path = Path(path)
    h, w = image.shape[:2]
    if path.suffix.lower() in (".jpg", ".jpeg"):
        buf = io.BytesIO()
        Image.fromarray(image).save(buf, format="JPEG", quality=jpeg_quality)
        f_mm = truth.intrinsics_true.fx * sensor_width_mm / max(w, h)
        record = ExifRecord(focal_length_mm=f_mm, pixel_width=w, pixel_height=h)
        path.write_bytes(insert_exif(buf.getvalue(), record))
    else:
        write_png(path, image)


def write_test_directory(
    out_dir: str | Path,
    dictionary: MarkerDictionary,
    spec: BoardSpec,
    scenes: Sequence[tuple[str, SceneTruth, int, int]],
    sensor_width_mm: float = 6.4,
    sensor_height_mm: float = 4.8,
    focal_length_mm_override: float | None = None,
) -> Path:
    """Lay out a ready-to-scan test directory.

    Writes ``board.json``, ``cass.json``, ``images/<name>`` for every scene
    and ``truth/<stem>.json`` sidecars.  ``name`` picks the format by its
    suffix (``.jpg`` or ``.png``).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(exist_ok=True)
    save_board(out / "board.json", dictionary, spec)
    config = {
        "sensor_width_mm": sensor_width_mm,
        "sensor_height_mm": sensor_height_mm,
        "square_length_mm": spec.square_length_mm,
        "board_spec": "board.json",
    }
    if focal_length_mm_override is not None:
        config["focal_length_mm_override"] = focal_length_mm_override
    (out / "cass.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    for name, truth, w, h in scenes:
        image = render_scene(dictionary, spec, truth, w, h)
        write_scene(out / "images" / name, image, truth, sensor_width_mm)
        doc = {"image": name, "width": w, "height": h, **truth.to_json()}
        (out / "truth" / f"{Path(name).stem}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out
