"""Patch-level features from the image-text encoder, plus text prototypes.

The encoder's standard last hidden state shows negative text/patch
alignment; extraction therefore bypasses the final block's attention
mixing and its MLP, keeping only the value path: h + out_proj(v_proj(
ln1(h))), then the post layernorm and the visual projection. Crop cls
tokens come from the unmodified forward pass.
"""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image


def _l2(x: torch.Tensor) -> torch.Tensor:
    return x / x.norm(dim=-1, keepdim=True)


def _pooled(output):
    # transformers v5 returns an output object; v4 returned the tensor
    return output.pooler_output if hasattr(output, "pooler_output") else output


def split_crops(image: Image.Image, oversample: int, crop_grid, crop_px: int):
    """Resize to the oversampled square and cut non-overlapping crops."""
    rows, cols = crop_grid
    if rows * crop_px != oversample or cols * crop_px != oversample:
        raise ValueError(
            f"oversample {oversample} must equal crop_grid {crop_grid} x crop size {crop_px}"
        )
    big = image.convert("RGB").resize((oversample, oversample), Image.BICUBIC)
    arr = np.asarray(big)
    return [
        (r, c, arr[r * crop_px:(r + 1) * crop_px, c * crop_px:(c + 1) * crop_px])
        for r in range(rows)
        for c in range(cols)
    ]


def modified_patch_features(clip, pixel_values: torch.Tensor) -> torch.Tensor:
    """Value-path patch embeddings of the final block, visually projected.

    Returns (B, grid, grid, D), l2-normalized, with the cls token dropped.
    """
    vision = clip.vision_model
    with torch.no_grad():
        h = vision.pre_layrnorm(vision.embeddings(pixel_values))
        for layer in vision.encoder.layers[:-1]:
            h = layer(h, None)
        last = vision.encoder.layers[-1]
        values = last.self_attn.v_proj(last.layer_norm1(h))
        h = h + last.self_attn.out_proj(values)  # no attention mixing, no MLP
        feats = clip.visual_projection(vision.post_layernorm(h))
    patches = _l2(feats[:, 1:, :])
    batch, n, dim = patches.shape
    grid = int(round(n ** 0.5))
    return patches.reshape(batch, grid, grid, dim)


def export_patch_features(bundle, config, image: Image.Image):
    """Per-crop modified patch grids and per-crop cls tokens.

    Returns (crops, cls_tokens): crops as [(row, col, h x w x D f32)],
    cls_tokens as (C x D f32), everything unit-normalized.
    """
    raw = split_crops(image, config.oversample, config.crop_grid, bundle.clip_input)
    pixel_values = bundle.clip_image_processor(
        images=[crop for _, _, crop in raw], return_tensors="pt"
    )["pixel_values"].to(bundle.device)
    patch_grids = modified_patch_features(bundle.clip, pixel_values)
    with torch.no_grad():
        cls_tokens = _l2(_pooled(bundle.clip.get_image_features(pixel_values=pixel_values)))
    crops = [
        (r, c, patch_grids[i].cpu().numpy().astype(np.float32))
        for i, (r, c, _) in enumerate(raw)
    ]
    return crops, cls_tokens.cpu().numpy().astype(np.float32)


def export_text_prototypes(bundle, config, class_names: list[str]) -> np.ndarray:
    """One unit-norm prototype per class from the single template."""
    if not class_names:
        raise ValueError("class list is empty")
    if len(set(class_names)) != len(class_names):
        raise ValueError("duplicate class names")
    prompts = [config.template.format(name) for name in class_names]
    tokens = bundle.tokenizer(prompts, padding=True, return_tensors="pt").to(bundle.device)
    with torch.no_grad():
        feats = _pooled(bundle.clip.get_text_features(
            input_ids=tokens["input_ids"], attention_mask=tokens["attention_mask"]))
    return _l2(feats).cpu().numpy().astype(np.float32)
