"""Measurement helpers shared by the tests (not part of the library)."""

import numpy as np

from cass.camera import CameraIntrinsics


def _crossings(profile):
    """Sub-pixel positions of the first rising and the last falling 0.5 crossing."""
    idx = np.flatnonzero(profile >= 0.5)
    if idx.size == 0 or idx[0] == 0 or idx[-1] == profile.size - 1:
        return None
    a, b = idx[0], idx[-1]
    left = a - 1 + (0.5 - profile[a - 1]) / (profile[a] - profile[a - 1])
    right = b + (profile[b] - 0.5) / (profile[b] - profile[b + 1])
    return left, right


def card_edges(rectified, color=(220, 40, 40), margin=10):
    """Width and height in pixels of a coloured card in a rectified image.

    Each row (column) crossing the card is reduced to the distance between
    its two 50% transitions of the red-minus-green signal; the median over
    the card's interior rows (columns) is returned.
    """
    img = rectified.astype(float)
    frac = (img[..., 0] - img[..., 1]) / (color[0] - color[1])
    mask = frac > 0.5
    rows = np.flatnonzero(mask.sum(1) > 0.5 * mask.sum(1).max())
    cols = np.flatnonzero(mask.sum(0) > 0.5 * mask.sum(0).max())
    w = [c[1] - c[0] for r in rows[margin:-margin] if (c := _crossings(frac[r])) is not None]
    h = [c[1] - c[0] for k in cols[margin:-margin] if (c := _crossings(frac[:, k])) is not None]
    return float(np.median(w)), float(np.median(h))


def random_homography(rng, spread=0.3):
    """Mild random projective map from a 200 mm board to a ~1000 px image."""
    h = np.diag([5.0, 5.0, 1.0])
    h[:2, 2] = rng.uniform(100, 300, 2)
    h[:2, :2] += rng.normal(0, spread, (2, 2))
    h[2, :2] = rng.normal(0, 4e-4, 2)
    return h


def intrinsics(f=1000.0, k1=0.0, k2=0.0, w=1000, h=800):
    return CameraIntrinsics(f, f, w / 2, h / 2, k1, k2)
