# %% [markdown]
# # Printing a board and finding its markers
#
# The board is a grid of square fiducials.  Each one has a black border
# and a 4x4 grid of data bits, and every code differs from every other
# (in any rotation) by at least 4 bits.

# %%
from pathlib import Path

import numpy as np

from cass.detect import detect_markers, draw_detections
from cass.pattern import BoardSpec, corner_coords, default_dictionary, dictionary_min_distance, render_board
from cass.raster import write_png

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

dictionary = default_dictionary()
print(len(dictionary), "codes, min distance", dictionary_min_distance(dictionary))

# %%
# 5 x 7 markers of 20 mm with 5 mm gaps; render at 10 px/mm for printing
board = BoardSpec(rows=5, cols=7, square_length_mm=20.0)
print(f"board is {board.board_width_mm} x {board.board_height_mm} mm")
raster = render_board(dictionary, board, px_per_mm=10)
write_png(out / "board.png", raster)
raster.shape

# %%
# feed the raster straight back to the detector
dets = detect_markers(np.pad(raster, 40, constant_values=255), dictionary)
print(len(dets), "markers found")
d = dets[0]
print("marker", d.id, "corners", d.corners_px.round(2).tolist())
print("expected", (corner_coords(board, d.id) * 10 + 40).tolist())

# %%
write_png(out / "board_detections.png", draw_detections(np.pad(raster, 40, constant_values=255), dets))
