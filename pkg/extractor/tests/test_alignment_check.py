import os

import numpy as np
import pytest

from fmseg_extract.alignment_check import top_patches_in_box


class TestTopPatchesInBox:
    def test_all_hot_patches_inside(self):
        heat = np.zeros((20, 20))
        heat[8:12, 8:12] = 1.0  # hot square in the middle
        fraction, coords = top_patches_in_box(heat, (0.3, 0.3, 0.7, 0.7), 0.01)
        assert fraction == 1.0
        assert len(coords) == 4  # ceil(0.01 * 400)

    def test_inverted_alignment_fails(self):
        heat = np.ones((20, 20))
        heat[8:12, 8:12] = -1.0  # object patches are the coldest
        fraction, _ = top_patches_in_box(heat, (0.3, 0.3, 0.7, 0.7), 0.01)
        assert fraction == 0.0

    def test_partial_overlap(self):
        heat = np.zeros((10, 10))
        heat[0, 0] = 3.0
        heat[5, 5] = 2.0
        fraction, _ = top_patches_in_box(heat, (0.4, 0.4, 0.7, 0.7), 0.02)
        assert fraction == 0.5

    def test_bad_box_rejected(self):
        with pytest.raises(ValueError):
            top_patches_in_box(np.ones((4, 4)), (0.5, 0.0, 0.4, 1.0))


@pytest.mark.skipif(
    not os.environ.get("FMSEG_REAL_WEIGHTS"),
    reason="needs pretrained checkpoints and a real photo (set FMSEG_REAL_WEIGHTS)",
)
def test_real_weights_positive_alignment(tmp_path):
    """Acceptance 9, second half: with the real image-text encoder, the
    modified extraction's top-1% patches for the object class must fall
    inside a hand-annotated box. Runs only where checkpoints exist."""
    from PIL import Image
    from fmseg_extract.clip_features import export_patch_features, export_text_prototypes
    from fmseg_extract.heatmap import mosaic
    from fmseg_extract.models import ExtractorConfig, load_pretrained

    image_path = os.environ["FMSEG_REAL_IMAGE"]  # photo with one dominant object
    box = tuple(float(x) for x in os.environ["FMSEG_REAL_BOX"].split(","))
    class_name = os.environ["FMSEG_REAL_CLASS"]

    config = ExtractorConfig()
    bundle = load_pretrained(config)
    image = Image.open(image_path)
    crops, _ = export_patch_features(bundle, config, image)
    protos = export_text_prototypes(bundle, config, [class_name])
    heat = mosaic(crops, config.crop_grid) @ protos[0].astype(np.float64)
    fraction, _ = top_patches_in_box(heat, box, 0.01)
    assert fraction == 1.0
