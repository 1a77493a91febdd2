import numpy as np
import pytest

from fmseg_extract.clip_features import export_patch_features, export_text_prototypes
from fmseg_extract.dino_features import export_vision_features
from fmseg_extract.sam_masks import export_auto_masks, export_point_masks


class TestPatchFeatures:
    def test_crop_count_and_geometry(self, bundle, config, tiny_image):
        crops, cls_tokens = export_patch_features(bundle, config, tiny_image)
        # 64px oversample with 32px crop input -> 2x2 crops of 4x4 patches
        assert len(crops) == 4
        assert {(r, c) for r, c, _ in crops} == {(0, 0), (0, 1), (1, 0), (1, 1)}
        assert all(arr.shape == (4, 4, 16) for _, _, arr in crops)
        assert cls_tokens.shape == (4, 16)

    def test_unit_normalized(self, bundle, config, tiny_image):
        crops, cls_tokens = export_patch_features(bundle, config, tiny_image)
        for _, _, arr in crops:
            np.testing.assert_allclose(
                np.linalg.norm(arr, axis=-1), 1.0, atol=1e-5)
        np.testing.assert_allclose(np.linalg.norm(cls_tokens, axis=-1), 1.0, atol=1e-5)

    def test_deterministic(self, bundle, config, tiny_image):
        a, cls_a = export_patch_features(bundle, config, tiny_image)
        b, cls_b = export_patch_features(bundle, config, tiny_image)
        np.testing.assert_array_equal(cls_a, cls_b)
        for (_, _, x), (_, _, y) in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_differs_from_unmodified_extraction(self, bundle, config, tiny_image):
        import torch
        from fmseg_extract.clip_features import modified_patch_features, split_crops
        raw = split_crops(tiny_image, 64, (2, 2), 32)
        pix = bundle.clip_image_processor(
            images=[c for _, _, c in raw], return_tensors="pt")["pixel_values"]
        modified = modified_patch_features(bundle.clip, pix)
        with torch.no_grad():
            plain = bundle.clip.vision_model(pixel_values=pix).last_hidden_state
            plain = bundle.clip.visual_projection(plain[:, 1:, :])
            plain = plain / plain.norm(dim=-1, keepdim=True)
        assert not np.allclose(modified.numpy().reshape(4, -1),
                               plain.numpy().reshape(4, -1))


class TestTextPrototypes:
    def test_shape_and_norm(self, bundle, config):
        protos = export_text_prototypes(bundle, config, ["cat", "dog"])
        assert protos.shape == (2, 16) and protos.dtype == np.float32
        np.testing.assert_allclose(np.linalg.norm(protos, axis=1), 1.0, atol=1e-5)

    def test_duplicate_names_rejected(self, bundle, config):
        with pytest.raises(ValueError, match="duplicate"):
            export_text_prototypes(bundle, config, ["cat", "cat"])

    def test_empty_list_rejected(self, bundle, config):
        with pytest.raises(ValueError, match="empty"):
            export_text_prototypes(bundle, config, [])


class TestVisionFeatures:
    def test_grid_shape_from_patch_size(self, bundle, config, tiny_image):
        grid = export_vision_features(bundle, config, tiny_image)
        assert grid.shape == (4, 4, 32)  # 64px / 16px patches
        np.testing.assert_allclose(np.linalg.norm(grid, axis=-1), 1.0, atol=1e-5)

    def test_wrong_size_resized(self, bundle, config, tiny_image, caplog):
        import logging
        small = tiny_image.resize((30, 20))
        with caplog.at_level(logging.INFO):
            grid = export_vision_features(bundle, config, small)
        assert grid.shape == (4, 4, 32)
        assert any("resizing" in r.message for r in caplog.records)

    def test_deterministic(self, bundle, config, tiny_image):
        a = export_vision_features(bundle, config, tiny_image)
        b = export_vision_features(bundle, config, tiny_image)
        np.testing.assert_array_equal(a, b)


class TestMasks:
    def test_point_masks_contract(self, bundle, config, tiny_image):
        out = export_point_masks(bundle, config, tiny_image,
                                 [(30, 30), (25, 40), (40, 25)])
        assert len(out) == 3
        for mask, conf in out:
            assert mask.shape == (64, 64) and mask.dtype == np.uint8
            assert set(np.unique(mask)) <= {0, 1}
            assert 0.0 <= conf <= 1.0

    def test_empty_points_rejected(self, bundle, config, tiny_image):
        with pytest.raises(ValueError):
            export_point_masks(bundle, config, tiny_image, [])

    def test_auto_masks_unfiltered_and_deduped(self, bundle, config, tiny_image):
        masks = export_auto_masks(bundle, config, tiny_image)
        for mask, conf in masks:
            assert mask.shape == (64, 64)
            assert 0.0 <= conf <= 1.0
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                inter = np.logical_and(masks[i][0], masks[j][0]).sum()
                union = np.logical_or(masks[i][0], masks[j][0]).sum()
                if union:
                    assert inter / union <= 0.85

    def test_point_masks_deterministic(self, bundle, config, tiny_image):
        a = export_point_masks(bundle, config, tiny_image, [(30, 30)])
        b = export_point_masks(bundle, config, tiny_image, [(30, 30)])
        for (ma, ca), (mb, cb) in zip(a, b):
            np.testing.assert_array_equal(ma, mb)
            assert ca == cb
