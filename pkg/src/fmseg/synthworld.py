"""Deterministic synthetic backend for desk-scale end-to-end verification.

The "image-text encoder" embeds class k at its text prototype t_k plus
gaussian noise; the "vision encoder" embeds it at R @ t_k for a fixed
column-orthonormal rotation R, so the ideal alignment head is the known
linear map R^T. The mask oracle answers from ground truth, which makes
"pick the highest-confidence mask" exactly optimal. With sigma=0 the
whole pipeline has a fixed point at mIoU 1.0.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import stage1
from .exchange import (
    ImageRecord,
    MaskProposal,
    TextPrototypeSet,
    write_manifest,
    write_tensor,
    write_vocabulary,
)
from .numerics import derive_seed, l2_normalize_rows, seeded_rng


@dataclass
class SyntheticWorld:
    num_classes: int
    text_dim: int
    vision_dim: int
    sigma: float
    seed: int
    prototypes: np.ndarray = field(repr=False)  # K x D_text, orthonormal rows
    rotation: np.ndarray = field(repr=False)  # D_vision x D_text, orthonormal cols


@dataclass
class SyntheticScene:
    """Axis-aligned rectangles over a background; later rects occlude earlier.

    Region ids: 0 is the background, i >= 1 is rects[i-1] (its visible part).
    """

    scene_id: str
    canvas: tuple[int, int]
    rects: list[tuple[int, int, int, int, int]]  # r0, c0, r1, c1 (half-open), class_id
    background_class: int

    def region_map(self) -> np.ndarray:
        h, w = self.canvas
        regions = np.zeros((h, w), dtype=np.int64)
        for i, (r0, c0, r1, c1, _) in enumerate(self.rects, start=1):
            if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
                raise ValueError(f"{self.scene_id}: rect {i - 1} outside {h}x{w} canvas")
            regions[r0:r1, c0:c1] = i
        return regions

    def region_class(self, region_id: int) -> int:
        return self.background_class if region_id == 0 else self.rects[region_id - 1][4]

    def class_map(self) -> np.ndarray:
        regions = self.region_map()
        lut = np.array(
            [self.background_class] + [r[4] for r in self.rects], dtype=np.int64
        )
        return lut[regions]


def _gram_schmidt_rows(m: np.ndarray) -> np.ndarray:
    out = np.array(m, dtype=np.float64)
    for i in range(out.shape[0]):
        for j in range(i):
            out[i] -= (out[i] @ out[j]) * out[j]
        norm = np.linalg.norm(out[i])
        if norm < 1e-9:
            raise ValueError("degenerate sample during orthogonalization")
        out[i] /= norm
    return out


def generate_world(num_classes: int, text_dim: int, vision_dim: int,
                   sigma: float, seed: int) -> SyntheticWorld:
    """Orthonormal class prototypes plus a rotation into vision space.

    Orthogonal prototypes make per-patch classification errors attributable
    to sigma rather than prototype collinearity.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 classes, got {num_classes}")
    if text_dim < num_classes:
        raise ValueError(f"text_dim {text_dim} < num_classes {num_classes}")
    if vision_dim < text_dim:
        raise ValueError(f"vision_dim {vision_dim} < text_dim {text_dim}")
    rng = seeded_rng(derive_seed(seed, "world"))
    prototypes = _gram_schmidt_rows(rng.standard_normal((num_classes, text_dim)))
    rotation = _gram_schmidt_rows(rng.standard_normal((vision_dim, text_dim)).T).T
    return SyntheticWorld(num_classes, text_dim, vision_dim, float(sigma), int(seed),
                          prototypes, rotation)


@dataclass
class RenderedImage:
    crop_features: list[tuple[int, int, np.ndarray]]
    cls_tokens: np.ndarray
    vision_features: np.ndarray
    patch_classes: np.ndarray


def patch_class_grid(class_map: np.ndarray, grid_h: int, grid_w: int,
                     num_classes: int) -> np.ndarray:
    """Majority pixel class under each patch cell (ties to lowest class id)."""
    h, w = class_map.shape
    if h % grid_h or w % grid_w:
        raise ValueError(f"canvas {h}x{w} not divisible by patch grid {grid_h}x{grid_w}")
    ph, pw = h // grid_h, w // grid_w
    blocks = class_map.reshape(grid_h, ph, grid_w, pw)
    counts = np.stack(
        [(blocks == k).sum(axis=(1, 3)) for k in range(num_classes)], axis=0
    )
    return np.argmax(counts, axis=0)


def render_scene(world: SyntheticWorld, scene: SyntheticScene,
                 crop_grid: tuple[int, int] = (4, 4),
                 patches_per_crop: int = 24) -> RenderedImage:
    """Noisy patch features, crop cls tokens, and vision features for a scene.

    The default geometry mirrors the full-scale setting (16 crops of
    24x24 patches giving a 96x96 grid); desk-scale configs shrink it.
    """
    rows, cols = crop_grid
    grid_h, grid_w = rows * patches_per_crop, cols * patches_per_crop
    classes = patch_class_grid(scene.class_map(), grid_h, grid_w, world.num_classes)

    rng = seeded_rng(derive_seed(world.seed, f"render:{scene.scene_id}"))
    text_noise = rng.standard_normal((grid_h, grid_w, world.text_dim))
    vision_noise = rng.standard_normal((grid_h, grid_w, world.vision_dim))

    clip_grid = l2_normalize_rows(world.prototypes[classes] + world.sigma * text_noise)
    vision_protos = world.prototypes @ world.rotation.T  # K x D_vision
    vision_grid = l2_normalize_rows(vision_protos[classes] + world.sigma * vision_noise)

    n = patches_per_crop
    crops = []
    tokens = []
    for r in range(rows):
        for c in range(cols):
            block = clip_grid[r * n:(r + 1) * n, c * n:(c + 1) * n]
            crops.append((r, c, block))
            tokens.append(block.reshape(-1, world.text_dim).mean(axis=0))
    cls_tokens = l2_normalize_rows(np.stack(tokens))
    return RenderedImage(crops, cls_tokens, vision_grid, classes)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.logical_or(a, b).sum())
    if union == 0:
        return 0.0
    return int(np.logical_and(a, b).sum()) / union


def oracle_point_masks(scene: SyntheticScene, points) -> list[MaskProposal]:
    """Three scored masks for a point prompt, like a mask-proposal model.

    Returns the region holding the majority of the points, plus 2 px
    dilated and eroded variants; confidences are true IoU against the
    exact region, so the exact one always scores 1.0.
    """
    pts = np.asarray(points, dtype=np.int64)
    if pts.size == 0:
        raise ValueError("empty point list")
    pts = pts.reshape(-1, 2)
    h, w = scene.canvas
    if (pts < 0).any() or (pts[:, 0] >= h).any() or (pts[:, 1] >= w).any():
        raise ValueError(f"point outside {h}x{w} canvas")
    regions = scene.region_map()
    hit = regions[pts[:, 0], pts[:, 1]]
    majority = int(np.argmax(np.bincount(hit, minlength=len(scene.rects) + 1)))
    exact = regions == majority
    dilated = ndimage.binary_dilation(exact, iterations=2)
    eroded = ndimage.binary_erosion(exact, iterations=2)
    return [
        MaskProposal(exact.astype(np.uint8), 1.0),
        MaskProposal(dilated.astype(np.uint8), _iou(dilated, exact)),
        MaskProposal(eroded.astype(np.uint8), _iou(eroded, exact)),
    ]


def oracle_auto_masks(scene: SyntheticScene, seed: int) -> list[MaskProposal]:
    """One unlabeled mask per visible region, in region-id order.

    Predicted IoU is drawn deterministically in [0.9, 1.0] from the seed;
    size/confidence filtering is the pipeline's job, not the oracle's.
    """
    rng = seeded_rng(seed)
    regions = scene.region_map()
    out = []
    for region_id in range(len(scene.rects) + 1):
        mask = regions == region_id
        if not mask.any():
            continue
        out.append(MaskProposal(mask.astype(np.uint8), float(0.9 + 0.1 * rng.random())))
    return out


def random_halves_scene(scene_id: str, num_classes: int, canvas: int,
                        rng: np.random.Generator) -> SyntheticScene:
    """A scene split into two class regions along a patch-aligned midline.

    Each class then dominates half the crops, so a 2x2 crop layout yields
    two crop votes per visible class (enough to pass the detection
    threshold T=1) and region boundaries align with patch cells.
    """
    a, b = (int(x) for x in rng.choice(num_classes, size=2, replace=False))
    vertical = bool(rng.integers(2))
    half = canvas // 2
    if vertical:
        rect = (0, 0, canvas, half, a)
    else:
        rect = (0, 0, half, canvas, a)
    return SyntheticScene(scene_id, (canvas, canvas), [rect], background_class=b)


# ---------------------------------------------------------------------------
# Dataset export

def export_dataset(world: SyntheticWorld, root, scenes: list[tuple[SyntheticScene, str]],
                   crop_grid: tuple[int, int], patches_per_crop: int,
                   query_point_count: int = 5) -> None:
    """Render scenes and write a complete exchange dataset under ``root``.

    Point-prompt mask sets are recorded per vocabulary class (from each
    class's own heatmap query points), mirroring how a real exporter
    records mask-model responses for later pipeline consumption.
    """
    root = Path(root)
    names = [f"class_{k:02d}" for k in range(world.num_classes)]
    write_vocabulary(root, TextPrototypeSet(names, world.prototypes, "a photo of a {}"))

    records = []
    for scene, split in scenes:
        records.append(
            _export_image(world, root, scene, split, crop_grid, patches_per_crop,
                          query_point_count)
        )
    write_manifest(root, records)


def _export_image(world, root: Path, scene: SyntheticScene, split: str,
                  crop_grid, patches_per_crop, query_point_count) -> ImageRecord:
    sid = scene.scene_id
    h, w = scene.canvas
    rendered = render_scene(world, scene, crop_grid, patches_per_crop)
    grid_h, grid_w = rendered.patch_classes.shape
    patch_px = h // grid_h

    crop_entries = []
    for r, c, block in rendered.crop_features:
        rel = f"tensors/{sid}_crop_r{r}c{c}.fmsg"
        write_tensor(root / rel, block)
        crop_entries.append({"row": r, "col": c, "path": rel})
    cls_rel = f"tensors/{sid}_cls.fmsg"
    write_tensor(root / cls_rel, rendered.cls_tokens)
    vision_rel = f"tensors/{sid}_vision.fmsg"
    write_tensor(root / vision_rel, rendered.vision_features)
    gt_rel = f"masks/{sid}_gt.fmsg"
    write_tensor(root / gt_rel, scene.class_map().astype(np.int32))

    autos = oracle_auto_masks(scene, derive_seed(world.seed, f"automask:{sid}"))
    auto_entries = []
    for j, prop in enumerate(autos):
        rel = f"masks/{sid}_auto_{j}.fmsg"
        write_tensor(root / rel, prop.mask)
        auto_entries.append({"path": rel, "confidence": prop.confidence})

    # Record the oracle's answer for every vocabulary class; the pipeline
    # later queries only the classes it detects.
    mosaic = stage1.mosaic_crop_features(rendered.crop_features, crop_grid)
    point_entries = []
    for k in range(world.num_classes):
        heat = stage1.class_heatmap(mosaic, world.prototypes[k])
        points = stage1.select_query_points(heat, query_point_count, patch_px, h, h)
        props = oracle_point_masks(scene, points)
        mask_rels = []
        for j, prop in enumerate(props):
            rel = f"masks/{sid}_pm_c{k}_{j}.fmsg"
            write_tensor(root / rel, prop.mask)
            mask_rels.append(rel)
        point_entries.append(
            {
                "class_id": k,
                "points": [[int(r), int(c)] for r, c in points],
                "masks": mask_rels,
                "confidences": [p.confidence for p in props],
            }
        )

    return ImageRecord(
        image_id=sid,
        pixel_size=(h, w),
        crop_grid=tuple(crop_grid),
        patch_grid=(grid_h, grid_w),
        crop_features=crop_entries,
        cls_tokens=cls_rel,
        split=split,
        vision_features=vision_rel,
        point_mask_sets=point_entries,
        auto_masks=auto_entries,
        ground_truth=gt_rel,
    )
