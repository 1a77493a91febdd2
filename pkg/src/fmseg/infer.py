"""Test-time inference and evaluation.

Base segmentation interpolates the patch-text similarity channels to
pixel resolution and takes the per-pixel argmax; refined segmentation
overlays automatically proposed masks, each painted with the majority
label of the patches it covers. mIoU accumulates integer confusion
counts globally across the evaluation set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exchange import MaskProposal
from .numerics import bilinear_resize, patch_coverage

IGNORE_INDEX = 255


@dataclass
class EvalProtocol:
    num_classes: int
    background_remap: frozenset[int] = field(default_factory=frozenset)
    background_id: int = 0
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        self.background_remap = frozenset(int(x) for x in self.background_remap)
        if self.background_id in self.background_remap:
            raise ValueError("background_id cannot be in the remapped set")


def classify_patches(head, vision_grid: np.ndarray, prototypes: np.ndarray):
    """Aligned patch-text similarities and their argmax (ties to lowest id)."""
    hp, wp, d = vision_grid.shape
    z, _ = head.forward(vision_grid.reshape(-1, d))
    sims = (z @ prototypes.T).reshape(hp, wp, -1)
    return sims, np.argmax(sims, axis=2)


def base_segmentation(sims: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Interpolate the K similarity channels, then argmax per pixel."""
    up = bilinear_resize(sims, out_h, out_w)
    return np.argmax(up, axis=2).astype(np.int64)


def refined_segmentation(base: np.ndarray, auto_masks: list[MaskProposal],
                         patch_argmax: np.ndarray) -> np.ndarray:
    """Overlay mask-majority labels onto the base map.

    Each mask takes the majority label of the patches it covers by more
    than half (ties to the lowest class id, maskless patches skipped);
    masks are painted in descending area order so smaller masks win
    overlaps.
    """
    out = base.copy()
    hp, wp = patch_argmax.shape
    labeled = []
    for idx, prop in enumerate(auto_masks):
        covered = patch_coverage(prop.mask, hp, wp) > 0.5
        if not covered.any():
            continue
        votes = np.bincount(patch_argmax[covered])
        labeled.append((int(prop.mask.sum()), idx, prop.mask, int(np.argmax(votes))))
    labeled.sort(key=lambda item: (-item[0], item[1]))
    for _, _, mask, label in labeled:
        out[mask != 0] = label
    return out


def remap_background(pred: np.ndarray, protocol: EvalProtocol) -> np.ndarray:
    """Replace ids in the protocol's background set with the background id."""
    if not protocol.background_remap:
        return pred.copy()
    out = pred.copy()
    out[np.isin(pred, sorted(protocol.background_remap))] = protocol.background_id
    return out


class ConfusionAccumulator:
    """Order-independent global IoU accumulation over an image set."""

    def __init__(self, protocol: EvalProtocol):
        self.protocol = protocol
        k = protocol.num_classes
        self.tp = np.zeros(k, dtype=np.int64)
        self.fp = np.zeros(k, dtype=np.int64)
        self.fn = np.zeros(k, dtype=np.int64)
        self.pixel_count = 0

    def add(self, pred: np.ndarray, gt: np.ndarray) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
        k = self.protocol.num_classes
        if np.any((pred < 0) | (pred >= k)):
            raise ValueError("prediction contains ids outside [0, num_classes)")
        valid = gt != self.protocol.ignore_index
        if np.any((gt[valid] < 0) | (gt[valid] >= k)):
            raise ValueError("ground truth contains ids outside [0, num_classes)")
        p = pred[valid].astype(np.int64)
        g = gt[valid].astype(np.int64)
        self.pixel_count += int(valid.sum())
        hit = p == g
        self.tp += np.bincount(g[hit], minlength=k)
        self.fp += np.bincount(p[~hit], minlength=k)
        self.fn += np.bincount(g[~hit], minlength=k)

    def result(self):
        """(per-class IoU with NaN where undefined, mean over defined classes)."""
        union = self.tp + self.fp + self.fn
        defined = union > 0
        if not defined.any():
            raise ValueError("no evaluable pixels: every ground-truth pixel is ignored")
        iou = np.full(self.protocol.num_classes, np.nan)
        iou[defined] = self.tp[defined] / union[defined]
        return iou, float(np.mean(iou[defined]))


def miou(pred: np.ndarray, gt: np.ndarray, protocol: EvalProtocol):
    """Single-pair convenience wrapper around the accumulator."""
    acc = ConfusionAccumulator(protocol)
    acc.add(pred, gt)
    return acc.result()
