"""Vision-encoder patch features for the alignment stage."""

from __future__ import annotations

import logging

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

_IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def export_vision_features(bundle, config, image: Image.Image) -> np.ndarray:
    """Unit-norm patch-token grid (cls token dropped), (g x g x D f32).

    Inputs of the wrong size are resized to the encoder's resolution.
    """
    side = config.vision_input
    rgb = image.convert("RGB")
    if rgb.size != (side, side):
        logger.info("resizing %sx%s input to %sx%s for the vision encoder",
                    rgb.size[0], rgb.size[1], side, side)
        rgb = rgb.resize((side, side), Image.BICUBIC)
    arr = (np.asarray(rgb).astype(np.float32) / 255.0 - _IMAGENET_MEAN) / _IMAGENET_STD
    pixel_values = torch.from_numpy(arr.transpose(2, 0, 1))[None].to(bundle.device)
    with torch.no_grad():
        hidden = bundle.dino(pixel_values=pixel_values).last_hidden_state
    patches = hidden[0, 1:, :]  # drop the cls token
    patches = patches / patches.norm(dim=-1, keepdim=True)
    n, dim = patches.shape
    grid = int(round(n ** 0.5))
    return patches.reshape(grid, grid, dim).cpu().numpy().astype(np.float32)
