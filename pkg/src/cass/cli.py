"""Command line entry point: ``pattern``, ``synth``, ``scan`` and ``verify``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CassError
from .pattern import BoardSpec, default_dictionary, generate_dictionary, load_board, render_board, save_board
from .raster import write_png


def _cmd_pattern(args: argparse.Namespace) -> int:
    count = max(args.count, args.rows * args.cols)
    if (args.bits, count, args.min_distance, args.seed) == (4, 50, 4, 0):
        dictionary = default_dictionary()
    else:
        dictionary = generate_dictionary(args.bits, count, args.min_distance, args.seed)
    spec = BoardSpec(args.rows, args.cols, args.square_mm, args.margin)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_png(out / "board.png", render_board(dictionary, spec, args.px_per_mm))
    save_board(out / "board.json", dictionary, spec)
    print(f"board {spec.board_width_mm:g} x {spec.board_height_mm:g} mm -> {out / 'board.png'}, {out / 'board.json'}")
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    from .synth import SceneRect, oblique_truth, write_test_directory

    dictionary, spec = load_board(args.board)
    objects = ()
    if args.card:
        cw, ch = 63.5, 88.9
        objects = (SceneRect((spec.board_width_mm - cw) / 2, (spec.board_height_mm - ch) / 2, cw, ch),)
    scenes = []
    for i in range(args.count):
        tilt = args.tilt if args.count == 1 else args.tilt * i / (args.count - 1)
        truth = oblique_truth(
            spec, args.width, args.height, tilt_deg=tilt, roll_deg=args.roll + 7.0 * i,
            k1=args.k1, k2=args.k2, noise_sigma=args.noise, blur_radius=args.blur,
            seed=args.seed + i, objects=objects,
        )
        scenes.append((f"scene_{i:03d}.{args.format}", truth, args.width, args.height))
    override = args.focal_override
    if args.format == "png" and override is None:
        # PNG carries no EXIF, so the config has to supply the focal length
        override = scenes[0][1].intrinsics_true.fx * args.sensor_width_mm / max(args.width, args.height)
    out = write_test_directory(
        args.output_dir, dictionary, spec, scenes,
        sensor_width_mm=args.sensor_width_mm, sensor_height_mm=args.sensor_height_mm,
        focal_length_mm_override=override,
    )
    print(f"{len(scenes)} scene(s) written to {out / 'images'}")
    return 0


def _cmd_scan(args: argparse.Namespace) -> int:
    from .pipeline import load_config, run_batch

    config = load_config(args.input_dir, args.output_dir, args.np, args.write_intermediate, args.jobs)
    results = run_batch(config)
    for r in results:
        if r.status == "ok":
            print(f"ok      {r.name}: {r.markers} markers, rms {r.rms_px:.3f} px -> {r.output}")
        else:
            print(f"skipped {r.name}: {r.reason}")
    ok = sum(r.status == "ok" for r in results)
    print(f"{ok} ok, {len(results) - ok} skipped; summary in {Path(args.output_dir) / 'summary.json'}")
    return 0


def _cmd_verify(args: argparse.Namespace) -> int:
    from .pipeline import verify_artifact

    image = None
    if args.image:
        from .raster import read_image

        image = read_image(args.image)
    mm_a, mm_b = verify_artifact(image, args.np, args.edge_a_px, args.edge_b_px)
    report = {"mm_a": mm_a, "mm_b": mm_b}
    status = 0
    if args.expected_mm:
        exp_a, exp_b = args.expected_mm
        err_a = 100.0 * abs(mm_a - exp_a) / exp_a
        err_b = 100.0 * abs(mm_b - exp_b) / exp_b
        passed = max(err_a, err_b) <= args.tolerance_pct
        report.update(error_pct_a=err_a, error_pct_b=err_b, tolerance_pct=args.tolerance_pct, passed=passed)
        status = 0 if passed else 1
    print(json.dumps(report, indent=2))
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cass",
        description="Turn photographs of objects on a printed marker board into metrically rectified scans.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pattern", help="generate a printable board and its JSON spec")
    p.add_argument("output_dir")
    p.add_argument("--rows", type=int, default=5)
    p.add_argument("--cols", type=int, default=7)
    p.add_argument("--square-mm", type=float, default=20.0, help="marker side length in mm")
    p.add_argument("--margin", type=float, default=0.25, help="gap between markers as a fraction of the side")
    p.add_argument("--px-per-mm", type=float, default=10.0)
    p.add_argument("--bits", type=int, default=4, help="data bits per marker side")
    p.add_argument("--count", type=int, default=50, help="dictionary size (raised to rows*cols if smaller)")
    p.add_argument("--min-distance", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_pattern)

    p = sub.add_parser("synth", help="render synthetic photographs into a ready-to-scan test directory")
    p.add_argument("board", help="board JSON written by 'cass pattern'")
    p.add_argument("output_dir")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--width", type=int, default=1600)
    p.add_argument("--height", type=int, default=1200)
    p.add_argument("--tilt", type=float, default=30.0, help="largest obliquity in degrees")
    p.add_argument("--roll", type=float, default=0.0)
    p.add_argument("--k1", type=float, default=-0.1)
    p.add_argument("--k2", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=3 / 255, help="noise sigma as a fraction of full scale")
    p.add_argument("--blur", type=float, default=1.0, help="box blur radius in pixels")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("jpg", "png"), default="jpg")
    p.add_argument("--card", action="store_true", help="place a 63.5 x 88.9 mm red card on the board")
    p.add_argument("--sensor-width-mm", type=float, default=6.4)
    p.add_argument("--sensor-height-mm", type=float, default=4.8)
    p.add_argument("--focal-override", type=float, default=None, help="write focal_length_mm_override to cass.json")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("scan", help="calibrate and rectify every image in INPUT_DIR/images")
    p.add_argument("input_dir", help="test directory holding cass.json and images/")
    p.add_argument("output_dir")
    p.add_argument("np", type=float, help="output pixels per millimetre (try 5, 10 or 20)")
    p.add_argument("--write-intermediate", action="store_true", help="also write marker overlays and calibration reports")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: CPU count)")
    p.set_defaults(func=_cmd_scan)

    p = sub.add_parser("verify", help="convert edge lengths measured in a rectified image to millimetres")
    p.add_argument("np", type=float)
    p.add_argument("edge_a_px", type=float)
    p.add_argument("edge_b_px", type=float)
    p.add_argument("--image", help="rectified image the edges were measured on")
    p.add_argument("--expected-mm", type=float, nargs=2, metavar=("A", "B"))
    p.add_argument("--tolerance-pct", type=float, default=0.25)
    p.set_defaults(func=_cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CassError as exc:
        print(f"error [{exc.code}]: {exc.message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
