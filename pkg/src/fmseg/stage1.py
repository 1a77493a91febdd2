"""Training-free pseudo-label generation.

Stage 1.1: classify crops against the text prototypes, vote classes as
detected, prompt the mask oracle at each detected class's hottest
patches, keep the most confident of the returned masks. Stage 1.2: label
the oracle's automatically proposed masks by their mean patch feature's
nearest detected prototype. The two sets are then fused with a seeded
subsample of stage 1.2 to keep it from overpowering training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import events
from .exchange import ImageBundle, MaskProposal, PseudoAnnotation, TextPrototypeSet
from .numerics import derive_seed, patch_coverage, seeded_rng

__all__ = [
    "DetectionConfig", "OracleFailure", "RecordedMaskOracle", "TextPrototypeSet",
    "mosaic_crop_features", "demosaic_features", "classify_crops", "detect_classes",
    "class_heatmap", "select_query_points", "stage11_generate", "stage12_label",
    "fuse_and_balance", "detect_for_bundle", "process_image",
]


@dataclass
class DetectionConfig:
    crop_vote_threshold: int = 1
    strict_vote_threshold: bool = True  # detected iff votes > T; >= T when False
    semi_supervised: bool = False
    query_point_count: int = 5
    patch_px: int = 14
    mask_space: int = 518
    auto_mask_confidence: float = 0.97
    auto_mask_min_area: float = 0.001
    balance_ratio: float = 0.75
    seed: int = 0

    def __post_init__(self):
        if self.crop_vote_threshold < 0:
            raise ValueError("crop_vote_threshold must be >= 0")
        for name in ("auto_mask_confidence", "auto_mask_min_area", "balance_ratio"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


class OracleFailure(RuntimeError):
    """The mask oracle could not answer a prompt (annotation is skipped)."""


class RecordedMaskOracle:
    """File-backend oracle: serves mask responses recorded per class."""

    def __init__(self, bundle: ImageBundle):
        self._sets = {ps.class_id: ps for ps in bundle.point_mask_sets}

    def __call__(self, points, class_id: int) -> list[MaskProposal]:
        if class_id not in self._sets:
            raise OracleFailure(f"no recorded mask set for class {class_id}")
        ps = self._sets[class_id]
        return [MaskProposal(m, c) for m, c in zip(ps.masks, ps.confidences)]


def mosaic_crop_features(crops, grid: tuple[int, int]) -> np.ndarray:
    """Rearrange per-crop patch grids into the full-image feature grid.

    Crop (r, c)'s patch (i, j) lands at (r*h + i, c*w + j).
    """
    rows, cols = grid
    expected = {(r, c) for r in range(rows) for c in range(cols)}
    got = {(r, c) for r, c, _ in crops}
    if got != expected:
        raise ValueError(f"crop grid incomplete: missing {sorted(expected - got)}")
    shapes = {arr.shape for _, _, arr in crops}
    if len(shapes) != 1:
        raise ValueError(f"inconsistent crop shapes: {sorted(shapes)}")
    h, w, d = next(iter(shapes))
    out = np.empty((rows * h, cols * w, d), dtype=np.float64)
    for r, c, arr in crops:
        out[r * h:(r + 1) * h, c * w:(c + 1) * w] = arr
    return out


def demosaic_features(grid_arr: np.ndarray, grid: tuple[int, int]):
    """Inverse of :func:`mosaic_crop_features` (mosaicking is a bijection)."""
    rows, cols = grid
    gh, gw, _ = grid_arr.shape
    if gh % rows or gw % cols:
        raise ValueError(f"grid {gh}x{gw} not divisible into {rows}x{cols} crops")
    h, w = gh // rows, gw // cols
    return [
        (r, c, grid_arr[r * h:(r + 1) * h, c * w:(c + 1) * w].copy())
        for r in range(rows)
        for c in range(cols)
    ]


def classify_crops(cls_tokens: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Nearest prototype per crop token (ties to the lowest class index)."""
    sims = np.asarray(cls_tokens) @ np.asarray(prototypes).T
    return np.argmax(sims, axis=1)


def detect_classes(crop_classes, config: DetectionConfig,
                   image_level_labels=None) -> list[int]:
    """Class ids assigned to more crops than the vote threshold, ascending.

    In semi-supervised mode the provided image-level labels are taken
    verbatim and no vote check happens.
    """
    if config.semi_supervised:
        if image_level_labels is None:
            raise ValueError("semi_supervised requires image_level_labels on the record")
        return sorted(set(int(x) for x in image_level_labels))
    votes = np.bincount(np.asarray(crop_classes, dtype=np.int64))
    if config.strict_vote_threshold:
        detected = np.nonzero(votes > config.crop_vote_threshold)[0]
    else:
        detected = np.nonzero(votes >= config.crop_vote_threshold)[0]
    return [int(k) for k in detected]


def class_heatmap(grid: np.ndarray, prototype: np.ndarray) -> np.ndarray:
    """Per-patch dot-product similarity to one prototype."""
    return np.asarray(grid) @ np.asarray(prototype)


def select_query_points(heatmap: np.ndarray, k: int, patch_px: int,
                        source_px: int, target_px: int) -> list[tuple[int, int]]:
    """Map the k hottest patches to pixel coordinates in the mask space.

    Patches are taken by descending similarity (ties in row-major order);
    patch (r, c)'s center ((r+0.5)*patch_px, (c+0.5)*patch_px) in the
    source pixel space is scaled by target/source, rounded half-up, and
    clamped. Returned coordinates are (row, col).
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    gh, gw = heat.shape
    if k > gh * gw:
        raise ValueError(f"requested {k} query points from a {gh}x{gw} heatmap")
    order = np.argsort(-heat.ravel(), kind="stable")[:k]
    scale = target_px / source_px
    points = []
    for flat in order:
        r, c = divmod(int(flat), gw)
        row = int(np.floor((r + 0.5) * patch_px * scale + 0.5))
        col = int(np.floor((c + 0.5) * patch_px * scale + 0.5))
        points.append((min(max(row, 0), target_px - 1), min(max(col, 0), target_px - 1)))
    return points


def detect_for_bundle(bundle: ImageBundle, vocab: TextPrototypeSet,
                      config: DetectionConfig) -> list[int]:
    crop_classes = classify_crops(bundle.cls_tokens, vocab.prototypes)
    labels = bundle.image_level_labels if config.semi_supervised else None
    return detect_classes(crop_classes, config, image_level_labels=labels)


def _full_grid(bundle: ImageBundle) -> np.ndarray:
    if bundle.feature_grid is not None:
        return bundle.feature_grid
    return mosaic_crop_features(bundle.crop_features, bundle.crop_grid)


def stage11_generate(bundle: ImageBundle, vocab: TextPrototypeSet,
                     mask_oracle, config: DetectionConfig,
                     detected: list[int] | None = None) -> list[PseudoAnnotation]:
    """Query-point prompting: one highest-confidence mask per detected class."""
    h, w = bundle.pixel_size
    if h != w or config.mask_space != h:
        raise ValueError(
            f"mask_space {config.mask_space} must equal the square record"
            f" pixel size, got {bundle.pixel_size}"
        )
    if detected is None:
        detected = detect_for_bundle(bundle, vocab, config)
    if not detected:
        return []
    grid = _full_grid(bundle)
    gh = grid.shape[0]
    source_px = config.patch_px * gh
    out = []
    for k in detected:
        heat = class_heatmap(grid, vocab.prototypes[k])
        points = select_query_points(heat, config.query_point_count,
                                     config.patch_px, source_px, config.mask_space)
        try:
            proposals = mask_oracle(points, k)
        except OracleFailure as exc:
            events.emit("warn", "mask-oracle-failure", image_id=bundle.image_id,
                        class_id=k, reason=str(exc))
            continue
        best = max(proposals, key=lambda p: p.confidence)
        out.append(PseudoAnnotation(bundle.image_id, k, best.mask, best.confidence, "1.1"))
    return out


def stage12_label(bundle: ImageBundle, grid: np.ndarray, detected: list[int],
                  vocab: TextPrototypeSet, config: DetectionConfig) -> list[PseudoAnnotation]:
    """Label automatic masks by mean patch feature vs detected prototypes.

    Masks below the confidence threshold or the minimum area fraction are
    dropped, as are masks covering no patch after >50% downprojection.
    """
    if not detected:
        return []
    hp, wp = grid.shape[:2]
    h, w = bundle.pixel_size
    protos = vocab.prototypes[detected]
    out = []
    for prop in bundle.auto_masks:
        if prop.confidence < config.auto_mask_confidence:
            continue
        if int(prop.mask.sum()) < config.auto_mask_min_area * h * w:
            continue
        covered = patch_coverage(prop.mask, hp, wp) > 0.5
        if not covered.any():
            events.emit("warn", "mask-covers-no-patch", image_id=bundle.image_id)
            continue
        mean = grid[covered].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            events.emit("warn", "mask-mean-feature-degenerate", image_id=bundle.image_id)
            continue
        sims = protos @ (mean / norm)
        label = detected[int(np.argmax(sims))]
        out.append(PseudoAnnotation(bundle.image_id, label, prop.mask, prop.confidence, "1.2"))
    return out


def fuse_and_balance(set11: list[PseudoAnnotation], set12: list[PseudoAnnotation],
                     config: DetectionConfig) -> list[PseudoAnnotation]:
    """All of stage 1.1 plus a seeded floor(ratio * |set12|) sample of stage 1.2."""
    take = math.floor(config.balance_ratio * len(set12))
    rng = seeded_rng(derive_seed(config.seed, "stage12-balance"))
    picked = sorted(rng.choice(len(set12), size=take, replace=False)) if take else []
    return list(set11) + [set12[int(i)] for i in picked]


def process_image(bundle: ImageBundle, vocab: TextPrototypeSet,
                  config: DetectionConfig, mask_oracle=None):
    """Run both stages on one image; returns (set11, set12)."""
    if mask_oracle is None:
        mask_oracle = RecordedMaskOracle(bundle)
    detected = detect_for_bundle(bundle, vocab, config)
    set11 = stage11_generate(bundle, vocab, mask_oracle, config, detected=detected)
    grid = _full_grid(bundle)
    set12 = stage12_label(bundle, grid, detected, vocab, config)
    return set11, set12
