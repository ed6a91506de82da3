"""Acceptance criteria, one test each.

Every test records a single PASS/FAIL line; the lines are printed at the
end of the pytest run (and by ``python tests/test_acceptance.py``).
"""

import json
import math
import struct
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

sys.path.insert(0, str(Path(__file__).parent))

from helpers import card_edges, random_homography  # noqa: E402

from cass.calib import Correspondences, ReprojectionModel, calibrate_image, dlt_homography, refine_calibration  # noqa: E402
from cass.camera import CameraIntrinsics, PlaneHomography, apply_homography, project  # noqa: E402
from cass.detect import MarkerDetection, detect_markers  # noqa: E402
from cass.exif import ExifRecord, _TiffView, insert_exif, parse_exif, parse_tiff, tiff_bytes  # noqa: E402
from cass.pattern import (  # noqa: E402
    BoardSpec,
    corner_coords,
    default_dictionary,
    dictionary_min_distance,
    generate_dictionary,
    render_board,
)
from cass.pipeline import load_config, run_batch, verify_artifact  # noqa: E402
from cass.raster import read_image  # noqa: E402
from cass.rectify import RectifySpec, rectify_image  # noqa: E402
from cass.synth import SceneRect, expected_corner, oblique_truth, render_scene, write_test_directory  # noqa: E402


class Results:
    def __init__(self):
        self._lines = {}

    def record(self, number, title, passed, detail):
        self._lines[number] = f"[{'PASS' if passed else 'FAIL'}] {number:>2}. {title}: {detail}"
        return passed

    def lines(self):
        return [self._lines[k] for k in sorted(self._lines)]

    def __bool__(self):
        return bool(self._lines)


RESULTS = Results()


def check(number, title, passed, detail):
    assert RESULTS.record(number, title, passed, detail), detail


# 1 ---------------------------------------------------------------------------


def test_01_card_scale_accuracy():
    dictionary = generate_dictionary(4, 63, 4, 0)
    board = BoardSpec(7, 9, 20.0)
    cw, ch = 63.5, 88.9
    card = SceneRect((board.board_width_mm - cw) / 2, (board.board_height_mm - ch) / 2, cw, ch)
    worst, slowest, details = 0.0, 0.0, []
    for seed in range(3):
        truth = oblique_truth(board, 1600, 1200, tilt_deg=20, roll_deg=10 + 25 * seed, k1=-0.10,
                              noise_sigma=3 / 255, seed=seed, objects=(card,))
        image = render_scene(dictionary, board, truth, 1600, 1200)
        # EXIF-style seed: focal length 5% off, centred principal point, no distortion
        f0 = 1.05 * truth.intrinsics_true.fx
        start = time.perf_counter()
        dets = detect_markers(image, dictionary)
        calib = calibrate_image(dets, board, CameraIntrinsics(f0, f0, 800, 600), (1600, 1200))
        out = rectify_image(image, calib.intrinsics, calib.homography, RectifySpec.for_board(board, 10))
        elapsed = time.perf_counter() - start
        a, b = card_edges(out)
        worst = max(worst, abs(a - 635.0), abs(b - 889.0))
        slowest = max(slowest, elapsed)
        details.append(f"{a:.2f}x{b:.2f}")
    check(1, "card-scale metric accuracy", worst <= 1.5 and slowest < 10.0,
          f"card edges {', '.join(details)} px (max |err| {worst:.2f} <= 1.5), slowest {slowest:.2f}s < 10s")


# 2 ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    dictionary = default_dictionary()
    board = BoardSpec(5, 7, 24.0)
    scenes = [(f"img_{i}.jpg", oblique_truth(board, 800, 600, tilt_deg=t, roll_deg=9 * i, k1=-0.1,
                                             noise_sigma=3 / 255, seed=i), 800, 600)
              for i, t in enumerate((5, 20, 35))]
    return write_test_directory(tmp_path_factory.mktemp("accept"), dictionary, board, scenes), board


def test_02_output_sizing(fixture_dir, tmp_path):
    d, board = fixture_dir
    bad, checked = [], 0
    for np_ in (5, 10, 20):
        out = tmp_path / f"np{np_}"
        for r in run_batch(load_config(d, out, np_, jobs=1)):
            if r.status != "ok":
                bad.append(f"{r.name} skipped ({r.reason})")
                continue
            shape = read_image(out / r.output).shape[:2]
            want = (round(board.board_height_mm * np_), round(board.board_width_mm * np_))
            checked += 1
            if shape != want:
                bad.append(f"{r.name}@{np_}: {shape} != {want}")
    check(2, "output sizing rule", not bad and checked == 9,
          f"{checked} outputs at np in {{5,10,20}} sized round(x*np) x round(y*np)" + (f"; {bad}" if bad else ""))


# 3 ---------------------------------------------------------------------------

_VERIFY = {"n": 0, "bad": 0}


@settings(max_examples=500, deadline=None)
@given(wp=st.floats(1e-6, 1e7, allow_subnormal=False), np_=st.floats(1e-3, 1e3, allow_subnormal=False))
def _verify_property(wp, np_):
    mm_a, mm_b = verify_artifact(None, np_, wp, wp)
    _VERIFY["n"] += 1
    if not (mm_a == wp / np_ and mm_b == wp / np_):
        _VERIFY["bad"] += 1


def test_03_verification_identity():
    _verify_property()
    worked = verify_artifact(None, 10, 635.02, 888.07)
    ok = _VERIFY["bad"] == 0 and worked == (635.02 / 10, 888.07 / 10)
    check(3, "verification identity", ok,
          f"{_VERIFY['n']} random (w_p, np) bit-identical to w_p/np; 635.02->{worked[0]:.3f} mm, 888.07->{worked[1]:.3f} mm")


# 4 ---------------------------------------------------------------------------


def test_04_dlt_oracle():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        truth = random_homography(rng)
        world = rng.uniform(0, 200, (int(rng.integers(4, 60)), 2))
        image = apply_homography(truth, world)
        h = dlt_homography(world, image)
        worst = max(worst, float(np.linalg.norm(apply_homography(h, world) - image, axis=1).max()))
    check(4, "homography oracle (DLT)", worst < 1e-9, f"max reprojection {worst:.2e} px < 1e-9 over 100 seeds")


# 5 / 6 -----------------------------------------------------------------------

_LM_COSTS: list[list[float]] = []


def _outlier_scene(seed):
    rng = np.random.default_rng(seed)
    board = BoardSpec(5, 7, 24.0)
    truth = oblique_truth(board, 1600, 1200, tilt_deg=rng.uniform(0, 40), roll_deg=rng.uniform(-30, 30),
                          k1=rng.uniform(-0.15, 0.0))
    dets = []
    for mid in board.marker_ids:
        corners = project(truth.h_true, truth.intrinsics_true, corner_coords(board, mid))
        dets.append(corners + rng.normal(0, 0.2, (4, 2)))
    flat = np.concatenate(dets)
    bad = rng.choice(len(flat), len(flat) // 5, replace=False)
    flat[bad] += rng.uniform(8, 80, (len(bad), 2)) * rng.choice([-1, 1], (len(bad), 2))
    dets = [MarkerDetection(mid, flat[4 * k : 4 * k + 4], 0) for k, mid in enumerate(board.marker_ids)]
    return board, truth, dets


def test_05_ransac_robustness():
    worst = 0.0
    for seed in range(50):
        board, truth, dets = _outlier_scene(seed)
        f0 = truth.intrinsics_true.fx * (1 + np.random.default_rng(seed).uniform(-0.1, 0.1))
        res = calibrate_image(dets, board, CameraIntrinsics(f0, f0, 800, 600), (1600, 1200), seed=seed)
        world = np.concatenate([corner_coords(board, m) for m in board.marker_ids])
        err = project(res.homography, res.intrinsics, world) - project(truth.h_true, truth.intrinsics_true, world)
        worst = max(worst, math.sqrt(float(np.mean(np.sum(err**2, axis=1)))))
        # record LM cost traces on the same data for criterion 6
        corr = res.correspondences.subset(res.inliers)
        costs = []
        refine_calibration(corr, CameraIntrinsics(f0, f0, 800, 600),
                           PlaneHomography(dlt_homography(corr.world, corr.image)),
                           callback=lambda it, c, ok: ok and costs.append(c))
        _LM_COSTS.append(costs)
    check(5, "robustness to 20% outliers", worst < 0.3,
          f"worst RMS vs ground truth {worst:.3f} px < 0.3 over 50 seeds")


def test_06_refinement_correctness():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(25):
        world = rng.uniform(0, 250, (40, 2))
        truth = oblique_truth(BoardSpec(5, 7, 24.0), 1600, 1200, tilt_deg=rng.uniform(0, 45),
                              roll_deg=rng.uniform(-90, 90), k1=rng.uniform(-0.3, 0.3), k2=rng.uniform(-0.1, 0.1))
        image = project(truth.h_true, truth.intrinsics_true, world) + rng.normal(0, 2, (40, 2))
        model = ReprojectionModel(world, image, 800, 600)
        theta = model.pack(truth.intrinsics_true, truth.h_true) * (1 + rng.normal(0, 1e-3, 11))
        jac = model.jacobian(theta)
        num = np.empty_like(jac)
        for k in range(11):
            step = 1e-6 * max(1.0, abs(theta[k]))
            tp, tm = theta.copy(), theta.copy()
            tp[k] += step
            tm[k] -= step
            num[:, k] = (model.residuals(tp) - model.residuals(tm)) / (2 * step)
        worst = max(worst, float(np.linalg.norm(jac - num) / np.linalg.norm(num)))
        costs = []
        refine_calibration(
            Correspondences.from_points(world, image), CameraIntrinsics(1800, 1800, 800, 600),
            PlaneHomography(dlt_homography(world, image)), callback=lambda it, c, ok: ok and costs.append(c))
        _LM_COSTS.append(costs)
    if len(_LM_COSTS) < 50:  # criterion 5 not run in this session
        for seed in range(20):
            board, truth, dets = _outlier_scene(seed)
            res = calibrate_image(dets, board, truth.intrinsics_true)
            corr = res.correspondences.subset(res.inliers)
            costs = []
            refine_calibration(corr, CameraIntrinsics(1800, 1800, 800, 600),
                               PlaneHomography(dlt_homography(corr.world, corr.image)),
                               callback=lambda it, c, ok: ok and costs.append(c))
            _LM_COSTS.append(costs)
    increases = sum(int(b > a) for c in _LM_COSTS for a, b in zip(c, c[1:]))
    steps = sum(len(c) for c in _LM_COSTS)
    check(6, "refinement correctness", worst < 1e-4 and increases == 0,
          f"Jacobian vs central differences rel err {worst:.1e} < 1e-4; "
          f"{increases} cost increases over {steps} accepted LM steps in {len(_LM_COSTS)} runs")


# 7 ---------------------------------------------------------------------------


def test_07_dictionary_validity():
    start = time.perf_counter()
    d = generate_dictionary(4, 50, 4, 0)
    dmin = dictionary_min_distance(d)
    # independent brute force with np.rot90 over every ordered pair
    brute = min(
        [int((a != np.rot90(a, k)).sum()) for a in d.codes for k in (1, 2, 3)]
        + [int((a != np.rot90(b, k)).sum()) for i, a in enumerate(d.codes) for j, b in enumerate(d.codes)
           if i != j for k in range(4)]
    )
    elapsed = time.perf_counter() - start
    check(7, "dictionary validity", len(d) == 50 and dmin >= 4 and brute == dmin and elapsed < 5,
          f"50 codes, min rotation Hamming distance {brute} >= 4, generated and verified in {elapsed:.2f}s < 5s")


# 8 ---------------------------------------------------------------------------


def test_08_detection_round_trip():
    dictionary = default_dictionary()
    board = BoardSpec(5, 7, 24.0)
    frontal = np.pad(render_board(dictionary, board, 10), 40, constant_values=255)
    dets = detect_markers(frontal, dictionary)
    err = [np.abs(d.corners_px - (corner_coords(board, d.id) * 10 + 40)).max() for d in dets]
    missing = len(board.marker_ids) - len(dets)
    worst = max(err)
    # other sizes: a pure black/white raster puts each edge on the pixel boundary
    # nearest to it, so the oracle for the corner is the rasterised edge
    rng = np.random.default_rng(8)
    raster_worst = 0.0
    for _ in range(10):
        b = BoardSpec(5, 7, rng.uniform(10, 30), rng.uniform(0.15, 0.4))
        ppm = rng.uniform(5, 12)
        dets = detect_markers(np.pad(render_board(dictionary, b, ppm), 30, constant_values=255), dictionary)
        missing += len(b.marker_ids) - len(dets)
        for d in dets:
            exp = np.ceil(corner_coords(b, d.id) * ppm - 0.5) + 30
            raster_worst = max(raster_worst, float(np.abs(d.corners_px - exp).max()))
    oblique_worst = 0.0
    for tilt in (10, 20, 30, 40):
        truth = oblique_truth(board, 1280, 960, tilt_deg=tilt, roll_deg=tilt / 2, k1=-0.1,
                              noise_sigma=3 / 255, seed=tilt)
        dets = detect_markers(render_scene(dictionary, board, truth, 1280, 960), dictionary)
        missing += len(board.marker_ids) - len(dets)
        for d in dets:
            exp = np.array([expected_corner(truth, board, d.id, k) for k in range(4)])
            oblique_worst = max(oblique_worst, float(np.abs(d.corners_px - exp).max()))
    ok = missing == 0 and max(worst, raster_worst, oblique_worst) < 0.5
    check(8, "detection round-trip", ok,
          f"{missing} markers missed; max corner error frontal {worst:.3f} px, 10 random frontal boards "
          f"{raster_worst:.3f} px (vs rasterised edges), oblique (<=40 deg) {oblique_worst:.3f} px; all < 0.5")


# 9 ---------------------------------------------------------------------------


def test_09_exif_fixture_suite(monkeypatch):
    reads = []
    original = _TiffView._unpack

    def spy(self, fmt, offset):
        value = original(self, fmt, offset)
        reads.append(0 <= offset and offset + struct.calcsize(fmt) <= len(self.buf))
        return value

    monkeypatch.setattr(_TiffView, "_unpack", spy)
    from io import BytesIO

    from PIL import Image

    buf = BytesIO()
    Image.fromarray(np.zeros((8, 8), np.uint8)).save(buf, format="JPEG")
    jpeg = buf.getvalue()
    rec = ExifRecord(focal_length_mm=415 / 100, focal_length_35mm=29, pixel_width=3264, pixel_height=2448)
    failures = []
    le, be = parse_tiff(tiff_bytes(rec, False)), parse_tiff(tiff_bytes(rec, True))
    if not (le == be == rec and le.focal_length_mm == 4.15):
        failures.append("endianness")
    if parse_exif(insert_exif(jpeg, rec, True)) != rec:
        failures.append("jpeg round trip")
    if parse_exif(insert_exif(jpeg, ExifRecord(pixel_width=5))).focal_length_mm is not None:
        failures.append("missing tag")
    blob = tiff_bytes(rec)
    for cut in range(len(blob)):
        try:
            parse_tiff(blob[:cut])
        except Exception as exc:  # noqa: BLE001
            if getattr(exc, "code", None) != "malformed-ifd":
                failures.append(f"truncated@{cut}: {exc!r}")
    rng = np.random.default_rng(9)
    fuzzed = 0
    for i in range(5000):
        src = bytearray(insert_exif(jpeg, rec, bool(i % 2)))
        for _ in range(int(rng.integers(1, 10))):
            src[int(rng.integers(len(src)))] = int(rng.integers(256))
        try:
            parse_exif(bytes(src[: int(rng.integers(2, len(src) + 1))]))
        except Exception as exc:  # noqa: BLE001
            if not hasattr(exc, "code"):
                failures.append(f"fuzz: {exc!r}")
        fuzzed += 1
    oob = reads.count(False)
    check(9, "EXIF parser fixtures", not failures and oob == 0,
          f"LE/BE/missing/truncated({len(blob)} cuts)/fuzz({fuzzed}) ok, focal 415/100 -> {le.focal_length_mm}, "
          f"{oob} out-of-bounds reads in {len(reads)}" + (f"; {failures[:3]}" if failures else ""))


# 10 --------------------------------------------------------------------------


def test_10_batch_determinism(fixture_dir, tmp_path):
    d, _ = fixture_dir
    run_batch(load_config(d, tmp_path / "a", 10, jobs=1))
    run_batch(load_config(d, tmp_path / "b", 10, jobs=2))
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    same = files == sorted(p.name for p in (tmp_path / "b").iterdir()) and all(
        (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    ok_count = json.loads((tmp_path / "a" / "summary.json").read_text())["ok"]
    check(10, "batch determinism", same and ok_count == 3,
          f"{len(files)} files (rectified PNGs + summary) byte-identical across two runs (serial vs 2 workers)")


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    print("\n".join(RESULTS.lines()))
    sys.exit(code)
