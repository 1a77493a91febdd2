import math

import numpy as np
import pytest

from fmseg.numerics import (
    bilinear_resize,
    l2_normalize_rows,
    logsumexp,
    patch_coverage,
    seeded_rng,
    similarity_matrix,
)


class TestLogsumexp:
    def test_single_zero(self):
        assert logsumexp([0.0]) == 0.0

    def test_ln_e_plus_two(self):
        assert logsumexp([1.0, 0.0, 0.0]) == pytest.approx(1.5514447139320509, abs=1e-12)

    def test_shift_does_not_overflow(self):
        assert logsumexp([1000.0, 1000.0]) == pytest.approx(1000.0 + math.log(2.0), abs=1e-9)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            logsumexp([])

    def test_shift_invariance(self):
        rng = seeded_rng(0)
        v = rng.standard_normal(50)
        for c in (-3.0, 0.5, 40.0):
            assert logsumexp(v + c) == pytest.approx(logsumexp(v) + c, abs=1e-10)


class TestL2NormalizeRows:
    def test_three_four_five(self):
        np.testing.assert_allclose(l2_normalize_rows([[3.0, 4.0]]), [[0.6, 0.8]])

    def test_axis_vectors(self):
        out = l2_normalize_rows([[1.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(out, [[1, 0], [0, 1]])

    def test_random_rows_unit(self):
        rng = seeded_rng(1)
        out = l2_normalize_rows(rng.standard_normal((5, 8)))
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)

    def test_zero_row_names_index(self):
        with pytest.raises(ValueError, match="2"):
            l2_normalize_rows([[1.0, 0.0], [2.0, 1.0], [0.0, 0.0]])


class TestSimilarityMatrix:
    def test_identity(self):
        eye = np.eye(2)
        np.testing.assert_array_equal(similarity_matrix(eye, eye), eye)

    def test_hand_value(self):
        np.testing.assert_array_equal(
            similarity_matrix([[1.0, 2.0]], [[3.0, 4.0]]), [[11.0]]
        )

    def test_unit_rows_bounded(self):
        rng = seeded_rng(2)
        a = l2_normalize_rows(rng.standard_normal((6, 5)))
        b = l2_normalize_rows(rng.standard_normal((4, 5)))
        s = similarity_matrix(a, b)
        assert np.all(np.abs(s) <= 1.0 + 1e-12)

    def test_transpose_symmetry(self):
        rng = seeded_rng(3)
        a = rng.standard_normal((3, 7))
        b = rng.standard_normal((5, 7))
        np.testing.assert_allclose(
            similarity_matrix(a, b), similarity_matrix(b, a).T, atol=1e-14
        )

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            similarity_matrix(np.ones((2, 3)), np.ones((2, 4)))


class TestBilinearResize:
    def test_identity(self):
        rng = seeded_rng(4)
        g = rng.standard_normal((5, 7, 2))
        np.testing.assert_array_equal(bilinear_resize(g, 5, 7), g)

    def test_constant_preserved(self):
        g = np.full((3, 4), 7.0)
        np.testing.assert_allclose(bilinear_resize(g, 9, 11), 7.0)

    def test_one_by_two_upsample(self):
        out = bilinear_resize(np.array([[0.0, 1.0]]), 1, 4)
        np.testing.assert_allclose(out, [[0.0, 0.25, 0.75, 1.0]])

    def test_linearity(self):
        rng = seeded_rng(5)
        g1 = rng.standard_normal((4, 6, 3))
        g2 = rng.standard_normal((4, 6, 3))
        lhs = bilinear_resize(2.5 * g1 - 1.25 * g2, 9, 5)
        rhs = 2.5 * bilinear_resize(g1, 9, 5) - 1.25 * bilinear_resize(g2, 9, 5)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_bad_target(self):
        with pytest.raises(ValueError):
            bilinear_resize(np.ones((2, 2)), 0, 3)


def test_seeded_rng_equal_streams():
    a = seeded_rng(123456789).random(1_000_000)
    b = seeded_rng(123456789).random(1_000_000)
    np.testing.assert_array_equal(a, b)


class TestPatchCoverage:
    def test_exact_blocks(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[:2, :2] = 1
        cov = patch_coverage(mask, 2, 2)
        np.testing.assert_array_equal(cov, [[1.0, 0.0], [0.0, 0.0]])

    def test_half_coverage(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[:, :1] = 1  # half of the left 2x2 cells
        cov = patch_coverage(mask, 2, 2)
        np.testing.assert_array_equal(cov[:, 0], [0.5, 0.5])

    def test_non_divisible_cells(self):
        mask = np.ones((5, 5), dtype=np.uint8)
        cov = patch_coverage(mask, 2, 2)
        np.testing.assert_array_equal(cov, 1.0)
