"""Per-image export orchestration: one image in, one manifest record out."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from . import writer
from .clip_features import export_patch_features, export_text_prototypes
from .dino_features import export_vision_features
from .heatmap import mosaic, top_query_points
from .sam_masks import export_auto_masks, export_point_masks

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def export_image(bundle, config, root, image_id: str, image: Image.Image,
                 prototypes: np.ndarray, split: str = "train",
                 ground_truth: np.ndarray | None = None,
                 image_level_labels: list[int] | None = None) -> dict:
    """Export every tensor for one image; returns its manifest record."""
    root = Path(root)
    side = config.vision_input

    crops, cls_tokens = export_patch_features(bundle, config, image)
    crop_entries = []
    for r, c, arr in crops:
        rel = f"tensors/{image_id}_crop_r{r}c{c}.fmsg"
        writer.write_tensor(root / rel, arr)
        crop_entries.append({"row": r, "col": c, "path": rel})
    cls_rel = f"tensors/{image_id}_cls.fmsg"
    writer.write_tensor(root / cls_rel, cls_tokens)

    vision = export_vision_features(bundle, config, image)
    vision_rel = f"tensors/{image_id}_vision.fmsg"
    writer.write_tensor(root / vision_rel, vision)

    auto_entries = []
    for j, (mask, score) in enumerate(export_auto_masks(bundle, config, image)):
        rel = f"masks/{image_id}_auto_{j}.fmsg"
        writer.write_tensor(root / rel, mask)
        auto_entries.append({"path": rel, "confidence": score})

    # record the mask model's answer for every vocabulary class; the
    # pipeline queries only the classes it detects
    grid = mosaic(crops, config.crop_grid)
    grid_h = grid.shape[0]
    patch_px = config.oversample / grid_h
    point_entries = []
    for k in range(prototypes.shape[0]):
        heat = grid @ prototypes[k].astype(np.float64)
        points = top_query_points(heat, config.query_points, patch_px,
                                  config.oversample, side)
        responses = export_point_masks(bundle, config, image, points)
        mask_rels = []
        for j, (mask, _) in enumerate(responses):
            rel = f"masks/{image_id}_pm_c{k}_{j}.fmsg"
            writer.write_tensor(root / rel, mask)
            mask_rels.append(rel)
        point_entries.append({
            "class_id": k,
            "points": [[int(r), int(c)] for r, c in points],
            "masks": mask_rels,
            "confidences": [score for _, score in responses],
        })

    gt_rel = None
    if ground_truth is not None:
        if ground_truth.shape != (side, side):
            raise ValueError(
                f"{image_id}: ground truth {ground_truth.shape} != {(side, side)}"
            )
        gt_rel = f"masks/{image_id}_gt.fmsg"
        writer.write_tensor(root / gt_rel, ground_truth.astype(np.int32))

    rows, cols = config.crop_grid
    crop_patches = bundle.clip_input // bundle.clip_patch
    return {
        "image_id": image_id,
        "split": split,
        "pixel_size": [side, side],
        "crop_grid": [rows, cols],
        "patch_grid": [rows * crop_patches, cols * crop_patches],
        "crop_features": crop_entries,
        "cls_tokens": cls_rel,
        "feature_grid": None,
        "vision_features": vision_rel,
        "point_mask_sets": point_entries,
        "auto_masks": auto_entries,
        "ground_truth": gt_rel,
        "image_level_labels": image_level_labels,
    }


def load_ground_truth(path, side: int) -> np.ndarray:
    """Label-map PNG (palette or grayscale), nearest-resized to the mask space."""
    img = Image.open(path)
    if img.mode not in ("L", "P", "I"):
        img = img.convert("L")
    img = img.resize((side, side), Image.NEAREST)
    return np.asarray(img).astype(np.int32)


def export_directory(bundle, config, images_dir, class_names, out_root,
                     gt_dir=None, labels=None, split: str = "train") -> int:
    """Export every image under ``images_dir``; returns the image count.

    Re-running against an existing dataset root merges into its manifest
    (records for re-exported image ids are replaced), so splits or shards
    can be exported by separate invocations.
    """
    images_dir = Path(images_dir)
    out_root = Path(out_root)
    paths = sorted(p for p in images_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"no images under {images_dir}")

    vocab_path = out_root / "vocab.json"
    if vocab_path.exists():
        existing = json.loads(vocab_path.read_text(encoding="utf-8"))
        if existing["class_names"] != list(class_names):
            raise ValueError(
                f"{out_root} already holds a vocabulary with different classes"
            )
        prototypes = writer.read_tensor(out_root / existing["prototypes"])
    else:
        prototypes = export_text_prototypes(bundle, config, class_names)
        writer.write_vocabulary(out_root, class_names, prototypes, config.template)

    records = []
    for path in paths:
        image_id = path.stem
        logger.info("exporting %s", image_id)
        gt = None
        if gt_dir is not None:
            gt_path = Path(gt_dir) / f"{image_id}.png"
            if gt_path.exists():
                gt = load_ground_truth(gt_path, config.vision_input)
        image_labels = None if labels is None else labels.get(image_id)
        records.append(export_image(
            bundle, config, out_root, image_id, Image.open(path), prototypes,
            split=split, ground_truth=gt, image_level_labels=image_labels,
        ))

    exported = len(records)
    manifest_path = out_root / "manifest.json"
    if manifest_path.exists():
        new_ids = {r["image_id"] for r in records}
        old = json.loads(manifest_path.read_text(encoding="utf-8"))["images"]
        records = [r for r in old if r["image_id"] not in new_ids] + records
    writer.write_manifest(out_root, records)
    return exported
