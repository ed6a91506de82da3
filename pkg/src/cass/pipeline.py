"""Batch scanning of a test directory and artifact verification.

A test directory holds ``cass.json`` and an ``images/`` folder.  Every file
in ``images/`` is decoded, calibrated against the board and warped so that
``np`` output pixels span one millimetre.  A file that fails any stage is
reported as skipped with the failing stage's error code; it never stops
the batch.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .calib import calibrate_image
from .detect import detect_markers, draw_detections
from .errors import CassError
from .exif import ExifRecord, SensorSpec, parse_exif, seed_intrinsics
from .pattern import BoardSpec, MarkerDictionary, load_board
from .raster import as_raster, read_image, write_png
from .rectify import RectifySpec, rectify_image

logger = logging.getLogger(__name__)

CONFIG_NAME = "cass.json"
IMAGES_DIR = "images"
SUMMARY_NAME = "summary.json"


@dataclass(frozen=True)
class RunConfig:
    sensor: SensorSpec
    square_length_mm: float
    board_path: Path
    np: float
    input_dir: Path
    output_dir: Path
    write_intermediate: bool = False
    focal_length_mm_override: float | None = None
    jobs: int = 1

    def __post_init__(self) -> None:
        if not (self.np > 0 and np.isfinite(self.np)):
            raise CassError("config-invalid", f"pixels per mm must be positive, got {self.np}")
        if not self.square_length_mm > 0:
            raise CassError("config-invalid", "square_length_mm must be positive")
        if self.focal_length_mm_override is not None and not self.focal_length_mm_override > 0:
            raise CassError("config-invalid", "focal_length_mm_override must be positive")
        if not (Path(self.input_dir) / IMAGES_DIR).is_dir():
            raise CassError("config-invalid", f"{self.input_dir} has no {IMAGES_DIR}/ directory")

    @property
    def images_dir(self) -> Path:
        return Path(self.input_dir) / IMAGES_DIR


def load_config(
    input_dir: str | Path,
    output_dir: str | Path,
    px_per_mm: float,
    write_intermediate: bool = False,
    jobs: int | None = None,
) -> RunConfig:
    """Read ``cass.json`` from ``input_dir``.

    Fields: ``sensor_width_mm``, ``sensor_height_mm``, ``square_length_mm``,
    ``board_spec`` (path relative to ``input_dir``) and optionally
    ``focal_length_mm_override``.
    """
    input_dir = Path(input_dir)
    path = input_dir / CONFIG_NAME
    try:
        doc = json.loads(path.read_text())
        sensor = SensorSpec(float(doc["sensor_width_mm"]), float(doc["sensor_height_mm"]))
        square = float(doc["square_length_mm"])
        board_path = input_dir / doc["board_spec"]
        override = doc.get("focal_length_mm_override")
        override = None if override is None else float(override)
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CassError):
            raise
        raise CassError("config-invalid", f"cannot read {path}: {exc}") from exc
    return RunConfig(
        sensor=sensor,
        square_length_mm=square,
        board_path=board_path,
        np=float(px_per_mm),
        input_dir=input_dir,
        output_dir=Path(output_dir),
        write_intermediate=write_intermediate,
        focal_length_mm_override=override,
        jobs=jobs or os.cpu_count() or 1,
    )


@dataclass
class ImageResult:
    name: str
    status: str  # "ok" or "skipped"
    reason: str | None = None
    markers: int = 0
    rms_px: float | None = None
    output: str | None = None
    warnings: list[str] = field(default_factory=list)


def read_exif_record(data: bytes, override: float | None) -> ExifRecord:
    """EXIF of a file; files without EXIF give an empty record."""
    try:
        record = parse_exif(data)
    except CassError as exc:
        if override is None and exc.code == "malformed-ifd":
            raise
        record = ExifRecord()
    if override is not None:
        record = replace(record, focal_length_mm=override)
    return record


def _output_stems(paths: list[Path]) -> list[str]:
    stems = [p.stem for p in paths]
    dup = {s for s in stems if stems.count(s) > 1}
    return [p.name.replace(".", "_") if p.stem in dup else p.stem for p in paths]


def process_image(
    path: Path,
    stem: str,
    config: RunConfig,
    dictionary: MarkerDictionary,
    board: BoardSpec,
) -> ImageResult:
    """Run one file through every stage; errors become a skipped result."""
    result = ImageResult(name=path.name, status="skipped")
    try:
        data = path.read_bytes()
        image = read_image(path)
        h, w = image.shape[:2]
        record = read_exif_record(data, config.focal_length_mm_override)
        intr0 = seed_intrinsics(record, config.sensor, w, h)
        detections = detect_markers(image, dictionary)
        result.markers = len(detections)
        out_dir = Path(config.output_dir)
        if config.write_intermediate:
            write_png(out_dir / f"{stem}_markers.png", draw_detections(image, detections))
        calib = calibrate_image(detections, board, intr0, (w, h))
        result.rms_px = round(calib.rms_px, 6)
        result.warnings = calib.warnings
        if config.write_intermediate:
            (out_dir / f"{stem}_calib.txt").write_text(calib.report())
        rectified = rectify_image(image, calib.intrinsics, calib.homography, RectifySpec.for_board(board, config.np))
        out_name = f"{stem}_rectified.png"
        write_png(out_dir / out_name, rectified)
        result.output = out_name
        result.status = "ok"
    except CassError as exc:
        result.reason = exc.code
        logger.info("%s skipped: %s", path.name, exc)
    except Exception as exc:  # noqa: BLE001 - one bad file must not end the batch
        result.reason = f"error:{type(exc).__name__}"
        logger.exception("%s failed", path.name)
    return result


def _process_star(args):
    return process_image(*args)


def run_batch(config: RunConfig) -> list[ImageResult]:
    """Process every file in ``images/`` and write outputs plus ``summary.json``."""
    files = sorted(p for p in config.images_dir.iterdir() if p.is_file() and not p.name.startswith("."))
    if not files:
        raise CassError("no-images-found", f"{config.images_dir} is empty")
    dictionary, nominal = load_board(config.board_path)
    board = nominal.with_square_length(config.square_length_mm)
    rspec = RectifySpec.for_board(board, config.np)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    tasks = [(p, s, config, dictionary, board) for p, s in zip(files, _output_stems(files))]
    if config.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(config.jobs, len(tasks))) as pool:
            results = list(pool.map(_process_star, tasks))
    else:
        results = [process_image(*t) for t in tasks]

    summary = {
        "np": config.np,
        "square_length_mm": config.square_length_mm,
        "board_width_mm": board.board_width_mm,
        "board_height_mm": board.board_height_mm,
        "output_width_px": rspec.out_width_px,
        "output_height_px": rspec.out_height_px,
        "ok": sum(r.status == "ok" for r in results),
        "skipped": sum(r.status != "ok" for r in results),
        "images": [asdict(r) for r in results],
    }
    (out_dir / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return results


def verify_artifact(
    rectified: np.ndarray | None, np_: float, edge_a_px: float, edge_b_px: float
) -> tuple[float, float]:
    """Convert edge lengths measured in a rectified image to millimetres.

    ``rectified`` is only validated; the measurement itself is made by the
    user (e.g. in an image editor).
    """
    if rectified is not None:
        as_raster(rectified)
    if not (np_ > 0 and edge_a_px > 0 and edge_b_px > 0):
        raise CassError("non-positive-measurement", "np and both edge lengths must be positive")
    return edge_a_px / np_, edge_b_px / np_
