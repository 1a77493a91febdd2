import numpy as np
import pytest

from fmseg.align import (
    HeadConfig,
    LinearHead,
    LossBatch,
    MlpHead,
    TransformerHead,
    create_head,
    load_head,
    save_head,
    tsupcon_loss,
)
from fmseg.numerics import seeded_rng

from conftest import random_unit_rows
from oracles import central_difference_grads


def _all_heads(d_in=6, d_out=4, seed=1):
    return [
        LinearHead(d_in, d_out, seed=seed),
        MlpHead(d_in, d_out, hidden=10, seed=seed),
        TransformerHead(d_in, d_out, hidden=12, heads=2, seed=seed),
    ]


class TestForwardContracts:
    def test_linear_identity_passthrough(self):
        head = LinearHead(3, 3, seed=0)
        head.params["w"] = np.eye(3)
        head.params["b"][:] = 0.0
        x = random_unit_rows(seeded_rng(0), 5, 3)
        z, _ = head.forward(x)
        np.testing.assert_allclose(z, x, atol=1e-12)

    @pytest.mark.parametrize("head", _all_heads(), ids=lambda h: h.variant)
    def test_unit_norm_outputs(self, head):
        x = seeded_rng(2).standard_normal((7, 6))
        z, _ = head.forward(x)
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-10)

    @pytest.mark.parametrize("head", _all_heads(), ids=lambda h: h.variant)
    def test_deterministic(self, head):
        x = seeded_rng(3).standard_normal((4, 6))
        z1, _ = head.forward(x)
        z2, _ = head.forward(x)
        np.testing.assert_array_equal(z1, z2)

    def test_transformer_permutation_equivariance(self):
        head = TransformerHead(6, 4, hidden=8, heads=3, seed=4)
        x = seeded_rng(5).standard_normal((9, 6))
        order = seeded_rng(6).permutation(9)
        z, _ = head.forward(x)
        z_perm, _ = head.forward(x[order])
        np.testing.assert_allclose(z_perm, z[order], atol=1e-12)

    def test_dim_mismatch(self):
        head = LinearHead(4, 3, seed=0)
        with pytest.raises(ValueError):
            head.forward(np.ones((2, 5)))


class TestBackward:
    def test_linear_sum_loss_unnormalized(self):
        # loss = sum(z) with normalization disabled: dW = X^T . 1
        head = LinearHead(4, 3, seed=7)
        x = seeded_rng(8).standard_normal((6, 4))
        z, cache = head.forward(x, normalize=False)
        grads = head.backward(cache, np.ones_like(z))
        np.testing.assert_allclose(grads["w"], x.T @ np.ones((6, 3)), atol=1e-12)
        np.testing.assert_allclose(grads["b"], 6.0, atol=1e-12)

    @pytest.mark.parametrize("head", _all_heads(), ids=lambda h: h.variant)
    def test_zero_upstream_gives_zero_grads(self, head):
        x = seeded_rng(9).standard_normal((5, 6))
        z, cache = head.forward(x)
        grads = head.backward(cache, np.zeros_like(z))
        for g in grads.values():
            np.testing.assert_array_equal(g, 0.0)

    @pytest.mark.parametrize("head", _all_heads(), ids=lambda h: h.variant)
    def test_finite_difference_through_loss(self, head):
        rng = seeded_rng(10)
        x = random_unit_rows(rng, 6, 6)
        t = random_unit_rows(rng, 3, 4)
        y = np.array([0, 1, 2, 0, 1, 2])

        z, cache = head.forward(x)
        _, dz = tsupcon_loss(LossBatch(z, y, t))
        grads = head.backward(cache, dz)

        def scalar():
            zz, _ = head.forward(x)
            loss, _ = tsupcon_loss(LossBatch(zz, y, t))
            return loss

        for name, param in head.params.items():
            fd = central_difference_grads(param, scalar, eps=1e-5)
            rel = np.abs(grads[name] - fd) / np.maximum(np.abs(fd), 1e-6)
            assert rel.max() < 1e-4, f"{head.variant}.{name}: {rel.max():.2e}"


class TestCheckpoints:
    @pytest.mark.parametrize("variant", ["linear", "mlp", "transformer"])
    def test_save_load_roundtrip(self, variant, tmp_path):
        cfg = HeadConfig(variant=variant, hidden=8, attention_heads=2)
        head = create_head(variant, 6, 4, cfg, seed=3)
        save_head(tmp_path / "ckpt", head, step_count=17)
        back = load_head(tmp_path / "ckpt")
        assert back.variant == variant
        x = seeded_rng(11).standard_normal((5, 6))
        z1, _ = head.forward(x)
        z2, _ = back.forward(x)
        np.testing.assert_allclose(z1, z2, atol=1e-6)  # f32 storage

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        cfg = HeadConfig("mlp", hidden=8)
        for d in ("a", "b"):
            head = create_head("mlp", 6, 4, cfg, seed=3)
            save_head(tmp_path / d, head, step_count=0)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
