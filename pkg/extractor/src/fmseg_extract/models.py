"""Model loading: pretrained checkpoints, or tiny random-weight stand-ins.

The tiny mode builds the same architectures from small configs with
seeded random weights; it exists so the full export path can be smoke
tested (and CI'd) on machines without model checkpoints or hub access.
"""

from __future__ import annotations

import json
import string
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch
from transformers import (
    CLIPConfig,
    CLIPImageProcessor,
    CLIPModel,
    CLIPTextConfig,
    CLIPTokenizer,
    CLIPVisionConfig,
    Dinov2Config,
    Dinov2Model,
    SamConfig,
    SamImageProcessor,
    SamModel,
    SamProcessor,
)
from transformers.models.sam.configuration_sam import (
    SamMaskDecoderConfig,
    SamPromptEncoderConfig,
    SamVisionConfig,
)

DEFAULT_CLIP = "openai/clip-vit-large-patch14-336"
DEFAULT_DINO = "facebook/dinov2-large"
DEFAULT_SAM = "facebook/sam-vit-huge"


@dataclass
class ExtractorConfig:
    clip_model: str = DEFAULT_CLIP
    dino_model: str = DEFAULT_DINO
    sam_model: str = DEFAULT_SAM
    oversample: int = 1344
    crop_grid: tuple[int, int] = (4, 4)
    vision_input: int = 518  # SAM runs at the same resolution
    template: str = "a photo of a {}"
    device: str = "cpu"
    points_per_side: int = 16  # automatic mask generation prompt grid
    query_points: int = 5

    def __post_init__(self):
        if "{}" not in self.template:
            raise ValueError("template must contain one {} class placeholder")


@dataclass
class ModelBundle:
    clip: CLIPModel
    clip_image_processor: CLIPImageProcessor
    tokenizer: CLIPTokenizer
    dino: Dinov2Model
    sam: SamModel
    sam_processor: SamProcessor
    device: str

    @property
    def clip_input(self) -> int:
        return self.clip.config.vision_config.image_size

    @property
    def clip_patch(self) -> int:
        return self.clip.config.vision_config.patch_size

    def eval_to(self, device: str):
        for model in (self.clip, self.dino, self.sam):
            model.eval().to(device)
        self.device = device
        return self


def load_pretrained(config: ExtractorConfig) -> ModelBundle:
    from transformers import AutoImageProcessor, AutoTokenizer

    clip = CLIPModel.from_pretrained(config.clip_model)
    clip_proc = AutoImageProcessor.from_pretrained(config.clip_model)
    tokenizer = AutoTokenizer.from_pretrained(config.clip_model)
    dino = Dinov2Model.from_pretrained(config.dino_model)
    sam = SamModel.from_pretrained(config.sam_model)
    sam_proc = SamProcessor.from_pretrained(config.sam_model)
    bundle = ModelBundle(clip, clip_proc, tokenizer, dino, sam, sam_proc, config.device)
    return bundle.eval_to(config.device)


def _tiny_tokenizer() -> CLIPTokenizer:
    # character-level vocabulary; enough for class-name templates
    tokens = ["<|startoftext|>", "<|endoftext|>"]
    chars = list(string.ascii_lowercase + string.digits) + [" ", "-", "_"]
    tokens += chars + [c + "</w>" for c in chars]
    vocab = {t: i for i, t in enumerate(tokens)}
    tmp = Path(tempfile.mkdtemp(prefix="fmseg_tok_"))
    (tmp / "vocab.json").write_text(json.dumps(vocab))
    (tmp / "merges.txt").write_text("#version: 0.2\n")
    return CLIPTokenizer(str(tmp / "vocab.json"), str(tmp / "merges.txt"))


def tiny_random_bundle(seed: int = 0, device: str = "cpu") -> ModelBundle:
    """Small random-weight CLIP/DINOv2/SAM sharing a 64 px mask space."""
    torch.manual_seed(seed)
    clip_cfg = CLIPConfig(
        vision_config=CLIPVisionConfig(
            image_size=32, patch_size=8, hidden_size=32, intermediate_size=64,
            num_hidden_layers=2, num_attention_heads=2, projection_dim=16,
        ).to_dict(),
        text_config=CLIPTextConfig(
            hidden_size=32, intermediate_size=64, num_hidden_layers=2,
            num_attention_heads=2, vocab_size=128, projection_dim=16,
            max_position_embeddings=64, bos_token_id=0, eos_token_id=1,
            pad_token_id=1,
        ).to_dict(),
        projection_dim=16,
    )
    clip = CLIPModel(clip_cfg)
    clip_proc = CLIPImageProcessor(
        do_resize=False, do_center_crop=False, size={"shortest_edge": 32},
    )
    dino = Dinov2Model(Dinov2Config(
        image_size=64, patch_size=16, hidden_size=32, num_hidden_layers=2,
        num_attention_heads=2, mlp_ratio=2,
    ))
    sam_cfg = SamConfig(
        vision_config=SamVisionConfig(
            hidden_size=32, num_hidden_layers=2, num_attention_heads=2,
            image_size=64, patch_size=8, output_channels=32, mlp_dim=64,
            global_attn_indexes=[1], num_pos_feats=16,
        ).to_dict(),
        prompt_encoder_config=SamPromptEncoderConfig(
            hidden_size=32, image_size=64, patch_size=8, mask_input_channels=4,
        ).to_dict(),
        mask_decoder_config=SamMaskDecoderConfig(
            hidden_size=32, num_attention_heads=2, mlp_dim=64, iou_head_hidden_dim=32,
        ).to_dict(),
    )
    sam = SamModel(sam_cfg)
    sam_proc = SamProcessor(SamImageProcessor(
        size={"longest_edge": 64}, pad_size={"height": 64, "width": 64},
        mask_size={"longest_edge": 16},
    ))
    bundle = ModelBundle(clip, clip_proc, _tiny_tokenizer(), dino, sam, sam_proc, device)
    return bundle.eval_to(device)


def tiny_config(seed: int = 0, out_root: str = ".") -> ExtractorConfig:
    """Geometry matching :func:`tiny_random_bundle` (64 px world)."""
    return ExtractorConfig(
        clip_model=f"tiny-random-{seed}", dino_model=f"tiny-random-{seed}",
        sam_model=f"tiny-random-{seed}", oversample=64, crop_grid=(2, 2),
        vision_input=64, points_per_side=4,
    )
