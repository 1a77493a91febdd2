"""Positive-alignment sanity check for the modified patch extraction.

Given a class heatmap and a hand-annotated object box, computes the
fraction of the top-percentile patches whose centers fall inside the box.
A correct extraction puts the hottest patches on the object; the broken
(unmodified last layer) variant inverts the alignment and fails this.
"""

from __future__ import annotations

import math

import numpy as np


def top_patches_in_box(heat: np.ndarray, box, top_fraction: float = 0.01):
    """Fraction of the ceil(top_fraction * N) hottest patches inside ``box``.

    ``box`` is (r0, c0, r1, c1) in relative [0, 1] coordinates, half-open.
    Returns (fraction, patch_coords).
    """
    r0, c0, r1, c1 = box
    if not (0.0 <= r0 < r1 <= 1.0 and 0.0 <= c0 < c1 <= 1.0):
        raise ValueError(f"bad relative box {box}")
    gh, gw = heat.shape
    count = max(1, math.ceil(top_fraction * heat.size))
    order = np.argsort(-heat.ravel(), kind="stable")[:count]
    coords = [divmod(int(flat), gw) for flat in order]
    inside = sum(
        1 for r, c in coords
        if r0 <= (r + 0.5) / gh < r1 and c0 <= (c + 0.5) / gw < c1
    )
    return inside / count, coords
