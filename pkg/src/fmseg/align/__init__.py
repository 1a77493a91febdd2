"""Stage 2: patch pseudo-labels, alignment heads, losses, training."""

from __future__ import annotations

import numpy as np

from ..exchange import PseudoAnnotation
from ..numerics import UNLABELED, patch_coverage
from .heads import (  # noqa: F401
    AlignmentHead,
    HeadConfig,
    LinearHead,
    MlpHead,
    TransformerHead,
    create_head,
    load_head,
    save_head,
)
from .losses import (  # noqa: F401
    LOSSES,
    LossBatch,
    prototype_loss,
    supcon_loss,
    tsupcon_loss,
)
from .training import NumericError, TrainConfig, train  # noqa: F401


def assign_patch_labels(annotations: list[PseudoAnnotation],
                        patch_grid: tuple[int, int],
                        image_size: tuple[int, int]) -> np.ndarray:
    """Per-patch pseudo labels from pixel masks; -1 marks unlabeled.

    A patch takes a mask's class when the mask covers more than half of
    its pixels; overlaps go to the higher-confidence annotation, then to
    the lower class index.
    """
    hp, wp = patch_grid
    labels = np.full((hp, wp), UNLABELED, dtype=np.int64)
    ranked = sorted(
        range(len(annotations)),
        key=lambda i: (-annotations[i].confidence, annotations[i].class_id, i),
    )
    for i in ranked:
        ann = annotations[i]
        if ann.mask.shape != tuple(image_size):
            raise ValueError(
                f"annotation mask {ann.mask.shape} does not match image {image_size}"
            )
        covered = patch_coverage(ann.mask, hp, wp) > 0.5
        labels[covered & (labels == UNLABELED)] = ann.class_id
    return labels
