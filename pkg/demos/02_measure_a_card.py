# %% [markdown]
# # Measuring a playing card from an oblique photograph
#
# A synthetic photograph stands in for a real one: a red 63.5 x 88.9 mm
# card lies on the board, the camera is tilted 20 degrees and the lens
# has barrel distortion.  Because the scene is synthetic we know the
# answer exactly.

# %%
import time
from pathlib import Path

import numpy as np

from cass.calib import calibrate_image
from cass.camera import CameraIntrinsics
from cass.detect import detect_markers
from cass.pattern import BoardSpec, generate_dictionary
from cass.pipeline import verify_artifact
from cass.raster import write_png
from cass.rectify import RectifySpec, rectify_image
from cass.synth import SceneRect, oblique_truth, render_scene

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

dictionary = generate_dictionary(4, 63, 4, seed=0)
board = BoardSpec(7, 9, 20.0)
card = SceneRect((board.board_width_mm - 63.5) / 2, (board.board_height_mm - 88.9) / 2, 63.5, 88.9)
truth = oblique_truth(board, 1600, 1200, tilt_deg=20, roll_deg=10, k1=-0.10, noise_sigma=3 / 255, objects=(card,))
photo = render_scene(dictionary, board, truth, 1600, 1200)
write_png(out / "card_photo.png", photo)

# %%
# the camera model starts from what EXIF would give: a focal length that
# is close but not exact, the image centre, and no distortion
t0 = time.perf_counter()
f0 = 1.05 * truth.intrinsics_true.fx
dets = detect_markers(photo, dictionary)
calib = calibrate_image(dets, board, CameraIntrinsics(f0, f0, 800, 600), (1600, 1200))
print(calib.report())

# %%
# warp to 10 pixels per millimetre
rect = rectify_image(photo, calib.intrinsics, calib.homography, RectifySpec.for_board(board, 10))
print(f"{len(dets)} markers, rectified to {rect.shape[1]} x {rect.shape[0]} px in {time.perf_counter() - t0:.2f}s")
write_png(out / "card_rectified.png", rect)

# %%
# measure the card the way a person would in an image editor: find the
# red region's left/right and top/bottom transitions along its middle
red = (rect[..., 0].astype(float) - rect[..., 1]) / 180.0
row = red[rect.shape[0] // 2]
col = red[:, rect.shape[1] // 2]


def span(profile):
    idx = np.flatnonzero(profile >= 0.5)
    a, b = idx[0], idx[-1]
    left = a - 1 + (0.5 - profile[a - 1]) / (profile[a] - profile[a - 1])
    right = b + (profile[b] - 0.5) / (profile[b] - profile[b + 1])
    return right - left


w_px, h_px = span(row), span(col)
print("card measures %.3f x %.3f mm" % verify_artifact(rect, 10, w_px, h_px))
