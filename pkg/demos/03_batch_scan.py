# %% [markdown]
# # Scanning a directory of photographs
#
# The batch tool expects a test directory with `cass.json` (sensor size,
# measured square length, board spec path) and an `images/` folder.
# Here the directory is built from synthetic JPEGs carrying an EXIF focal
# length, plus one file without EXIF to show how failures are reported.

# %%
import json
import shutil
from pathlib import Path

from cass.pattern import BoardSpec, default_dictionary
from cass.pipeline import load_config, run_batch
from cass.synth import oblique_truth, write_test_directory

root = Path(__file__).parent / "out" / "batch"
shutil.rmtree(root, ignore_errors=True)

board = BoardSpec(5, 7, 24.0)
scenes = [
    (f"shot_{i}.jpg", oblique_truth(board, 1200, 900, tilt_deg=tilt, roll_deg=15 * i, k1=-0.12,
                                    noise_sigma=3 / 255, seed=i), 1200, 900)
    for i, tilt in enumerate((0, 20, 35))
]
test_dir = write_test_directory(root / "test", default_dictionary(), board, scenes)
(test_dir / "images" / "screenshot.txt").write_text("not a photo")
print((test_dir / "cass.json").read_text())

# %%
# np = 5 pixels per millimetre; try 10 or 20 for finer output
config = load_config(test_dir, root / "out", 5, write_intermediate=True)
for r in run_batch(config):
    print(r.name, r.status, r.reason or f"{r.markers} markers, rms {r.rms_px:.3f} px")

# %%
summary = json.loads((root / "out" / "summary.json").read_text())
print(summary["ok"], "ok,", summary["skipped"], "skipped; outputs", summary["output_width_px"], "x", summary["output_height_px"])
