"""Deterministic dense numeric kernels shared by the whole pipeline.

Everything here is a pure function over float64 numpy arrays. The
interchange files store float32; widening to float64 happens on load so
these kernels always see full precision.
"""

from __future__ import annotations

import hashlib

import numpy as np

UNLABELED = -1


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator, the single RNG algorithm used project-wide.

    Identical seeds produce identical streams on every platform.
    """
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(root_seed: int, tag: str) -> int:
    """Stable 64-bit sub-seed for ``tag`` (image id, stream name, ...).

    Python's builtin ``hash`` is salted per process, so the digest comes
    from blake2b instead.
    """
    digest = hashlib.blake2b(tag.encode("utf-8"), digest_size=8).digest()
    return (int(root_seed) ^ int.from_bytes(digest, "little")) & 0xFFFFFFFFFFFFFFFF


def logsumexp(values) -> float:
    """log(sum(exp(v))) via max-shift; safe for |v| up to ~700."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("logsumexp of an empty vector")
    m = float(np.max(v))
    return m + float(np.log(np.sum(np.exp(v - m))))


def l2_normalize_rows(m: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Scale every row of ``m`` to unit Euclidean norm.

    Raises ValueError naming the first offending row if any row norm is
    below ``eps``.
    """
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1)
    bad = np.nonzero(norms <= eps)
    if bad[0].size:
        idx = tuple(int(b[0]) for b in bad)
        raise ValueError(f"cannot normalize zero row at index {idx}")
    return m / norms[..., None]


def similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dot-product similarities: out[i, j] = a[i] . b[j]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(
            f"similarity_matrix shape mismatch: {a.shape} vs {b.shape}"
        )
    return a @ b.T


def _resize_axis_weights(n_in: int, n_out: int):
    # Sample centers at (i + 0.5) * (in/out) - 0.5, edge-clamped
    # (align-corners=false convention).
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1.0)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    return lo, hi, frac


def bilinear_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize an H x W or H x W x C grid with bilinear interpolation.

    Uses the align-corners=false convention with edge clamping; constant
    input produces constant output, and resizing to the input size is the
    identity.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim not in (2, 3):
        raise ValueError(f"expected 2D or 3D grid, got shape {grid.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be at least 1x1")
    squeeze = grid.ndim == 2
    if squeeze:
        grid = grid[:, :, None]
    h, w = grid.shape[:2]
    r_lo, r_hi, r_f = _resize_axis_weights(h, out_h)
    c_lo, c_hi, c_f = _resize_axis_weights(w, out_w)
    top = grid[r_lo][:, c_lo] * (1 - c_f)[None, :, None] + grid[r_lo][:, c_hi] * c_f[None, :, None]
    bot = grid[r_hi][:, c_lo] * (1 - c_f)[None, :, None] + grid[r_hi][:, c_hi] * c_f[None, :, None]
    out = top * (1 - r_f)[:, None, None] + bot * r_f[:, None, None]
    return out[:, :, 0] if squeeze else out


def patch_coverage(mask: np.ndarray, grid_h: int, grid_w: int) -> np.ndarray:
    """Fraction of each patch cell's pixels covered by a binary mask.

    The pixel canvas is partitioned into grid_h x grid_w cells with
    integer boundaries floor(r*H/grid_h); works for non-divisible sizes.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected 2D mask, got shape {mask.shape}")
    h, w = mask.shape
    if grid_h < 1 or grid_w < 1 or grid_h > h or grid_w > w:
        raise ValueError(f"bad patch grid {grid_h}x{grid_w} for {h}x{w} mask")
    # Integral image gives exact box sums for arbitrary cell boundaries.
    integral = np.zeros((h + 1, w + 1), dtype=np.int64)
    integral[1:, 1:] = np.cumsum(np.cumsum(mask != 0, axis=0), axis=1)
    rb = (np.arange(grid_h + 1) * h) // grid_h
    cb = (np.arange(grid_w + 1) * w) // grid_w
    sums = (
        integral[np.ix_(rb[1:], cb[1:])]
        - integral[np.ix_(rb[:-1], cb[1:])]
        - integral[np.ix_(rb[1:], cb[:-1])]
        + integral[np.ix_(rb[:-1], cb[:-1])]
    )
    areas = (rb[1:] - rb[:-1])[:, None] * (cb[1:] - cb[:-1])[None, :]
    return sums / areas
