"""Camera-as-scanner: metric rectification of photographs taken over a printed marker board."""

from .calib import (
    CalibrationResult,
    Correspondences,
    build_correspondences,
    calibrate_image,
    dlt_homography,
    estimate_homography_dlt,
    estimate_homography_ransac,
    refine_calibration,
)
from .camera import CameraIntrinsics, PlaneHomography, distort_points, project, undistort_points
from .detect import DetectParams, MarkerDetection, detect_markers, refine_corner
from .errors import CassError
from .exif import ExifRecord, SensorSpec, parse_exif, seed_intrinsics
from .pattern import (
    BoardSpec,
    MarkerDictionary,
    corner_coords,
    default_dictionary,
    generate_dictionary,
    load_board,
    render_board,
    save_board,
)
from .pipeline import ImageResult, RunConfig, load_config, run_batch, verify_artifact
from .rectify import RectifySpec, rectify_image
from .synth import SceneRect, SceneTruth, expected_corner, oblique_truth, render_scene

__version__ = "0.1.0"
