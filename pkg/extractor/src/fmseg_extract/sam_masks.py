"""Point-prompted and automatic mask proposals from the mask model.

All masks are emitted at the shared mask resolution (the vision encoder's
input size) as {0,1} u8 arrays with predicted-IoU confidences. Automatic
generation prompts a regular point grid and deduplicates near-identical
proposals; no quality threshold is applied here (the pipeline owns it).
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image


def _prepare(bundle, config, image: Image.Image):
    side = config.vision_input
    return image.convert("RGB").resize((side, side), Image.BICUBIC)


def _predict(bundle, image: Image.Image, point_sets: list[list[tuple[int, int]]]):
    """Run the mask model on (row, col) prompt sets; returns per-set
    (3 x H x W bool masks, 3 predicted IoUs)."""
    # the processor wants (x, y) coordinates
    input_points = [[[(int(c), int(r)) for r, c in pts] for pts in point_sets]]
    inputs = bundle.sam_processor(
        images=image, input_points=input_points, return_tensors="pt"
    ).to(bundle.device)
    with torch.no_grad():
        out = bundle.sam(
            pixel_values=inputs["pixel_values"],
            input_points=inputs["input_points"],
            multimask_output=True,
        )
    masks = bundle.sam_processor.image_processor.post_process_masks(
        out.pred_masks.cpu(), inputs["original_sizes"].cpu(),
        inputs["reshaped_input_sizes"].cpu(),
    )[0]  # (n_sets, 3, H, W) bool
    scores = out.iou_scores[0].cpu().numpy()  # (n_sets, 3)
    return masks.numpy(), scores


def export_point_masks(bundle, config, image: Image.Image, points):
    """Three scored masks for one set of (row, col) query points."""
    if len(points) == 0:
        raise ValueError("empty point list")
    prepared = _prepare(bundle, config, image)
    masks, scores = _predict(bundle, prepared, [list(points)])
    out = []
    for i in range(3):
        out.append((masks[0, i].astype(np.uint8), float(np.clip(scores[0, i], 0.0, 1.0))))
    return out


def _mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def export_auto_masks(bundle, config, image: Image.Image, dedup_iou: float = 0.85):
    """Automatic proposals from a points_per_side^2 prompt grid.

    Near-duplicates (IoU > dedup_iou) collapse to the highest-scoring
    proposal; empty and full-frame proposals are discarded. Predicted-IoU
    filtering is deliberately NOT applied here.
    """
    prepared = _prepare(bundle, config, image)
    side = config.vision_input
    n = config.points_per_side
    coords = ((np.arange(n) + 0.5) * side / n).astype(int)
    point_sets = [[(int(r), int(c))] for r in coords for c in coords]
    masks, scores = _predict(bundle, prepared, point_sets)

    proposals = []
    area_limit = side * side * 0.98
    for s in range(masks.shape[0]):
        for i in range(3):
            mask = masks[s, i]
            area = int(mask.sum())
            if area == 0 or area >= area_limit:
                continue
            proposals.append((mask, float(np.clip(scores[s, i], 0.0, 1.0))))
    proposals.sort(key=lambda p: -p[1])
    kept = []
    for mask, score in proposals:
        if all(_mask_iou(mask, m) <= dedup_iou for m, _ in kept):
            kept.append((mask.astype(np.uint8), score))
    return kept
