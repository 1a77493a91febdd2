"""Heatmap query-point selection, mirroring the pipeline's conventions.

This is the exporter's own small reimplementation (the two packages talk
through files only): hottest patches first with row-major tie order,
patch centers scaled into the mask space, rounded half-up, clamped.
"""

from __future__ import annotations

import numpy as np


def mosaic(crops, crop_grid) -> np.ndarray:
    rows, cols = crop_grid
    by_pos = {(r, c): arr for r, c, arr in crops}
    h, w, d = crops[0][2].shape
    out = np.zeros((rows * h, cols * w, d), dtype=np.float64)
    for r in range(rows):
        for c in range(cols):
            out[r * h:(r + 1) * h, c * w:(c + 1) * w] = by_pos[(r, c)]
    return out


def top_query_points(heat: np.ndarray, count: int, patch_px: float,
                     source_px: int, target_px: int):
    """(row, col) coordinates of the hottest patch centers in target space."""
    gh, gw = heat.shape
    order = np.argsort(-heat.ravel(), kind="stable")[:count]
    scale = target_px / source_px
    points = []
    for flat in order:
        r, c = divmod(int(flat), gw)
        row = int(np.floor((r + 0.5) * patch_px * scale + 0.5))
        col = int(np.floor((c + 0.5) * patch_px * scale + 0.5))
        points.append((min(max(row, 0), target_px - 1), min(max(col, 0), target_px - 1)))
    return points
