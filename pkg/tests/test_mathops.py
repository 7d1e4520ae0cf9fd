"""Contracts of the public math operations, with double-precision oracles."""

import math

import numpy as np
import pytest

from earlyexit.errors import ArgumentError, DimensionError
from earlyexit.mathops import (cross_entropy, entropy, layer_norm, matmul,
                               softmax, validate_prob_vector)

RNG = np.random.default_rng(77)


class TestMatmul:
    def test_identity(self):
        out = matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]])
        assert np.allclose(out, [[3, 4], [5, 6]])

    def test_hand_checked_1x2_2x1(self):
        assert np.allclose(matmul([[1, 2]], [[3], [4]]), [[11]])

    def test_random_vs_naive_oracle(self):
        a = RNG.standard_normal((5, 7)).astype(np.float32)
        b = RNG.standard_normal((7, 3)).astype(np.float32)
        ref = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                acc = 0.0
                for k in range(7):
                    acc += float(a[i, k]) * float(b[k, j])
                ref[i, j] = acc
        assert np.allclose(matmul(a, b), ref, atol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_bit_reproducible(self):
        a = RNG.standard_normal((9, 11)).astype(np.float32)
        b = RNG.standard_normal((11, 6)).astype(np.float32)
        assert np.array_equal(matmul(a, b), matmul(a, b))

    def test_output_finite(self):
        a = RNG.standard_normal((4, 4)).astype(np.float32) * 1e3
        assert np.isfinite(matmul(a, a)).all()

    def test_non_finite_rejected(self):
        bad = np.array([[np.nan, 1.0]], dtype=np.float32)
        with pytest.raises(ArgumentError):
            matmul(bad, np.ones((2, 1), np.float32))


class TestSoftmax:
    def test_uniform(self):
        assert np.allclose(softmax([0, 0, 0, 0]), [0.25] * 4)

    def test_stability_extreme(self):
        p = softmax([1000.0, 0.0])
        assert np.isfinite(p).all()
        assert abs(p[0] - 1.0) < 1e-12
        assert p[1] < 1e-12

    def test_vs_direct_oracle(self):
        z = np.array([1.0, 2.0, 3.0])
        e = np.exp(z)
        assert np.allclose(softmax(z), e / e.sum(), atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ArgumentError):
            softmax([])

    def test_sums_to_one_and_shift_invariant(self):
        for _ in range(25):
            z = RNG.standard_normal(RNG.integers(2, 40)) * 10
            p = softmax(z)
            assert abs(p.sum() - 1.0) < 1e-6
            c = float(RNG.standard_normal()) * 50
            assert np.allclose(p, softmax(z + c), atol=1e-6)
            validate_prob_vector(p)


class TestEntropy:
    def test_uniform_max(self):
        assert abs(entropy([0.25] * 4) - math.log(4)) < 1e-9

    def test_one_hot_zero(self):
        assert entropy([0.0, 1.0, 0.0]) == 0.0

    def test_direct_evaluation_oracle(self):
        # -(0.5 ln 0.5 + 0.25 ln 0.25 + 0.25 ln 0.25) = 1.039721...
        assert abs(entropy([0.5, 0.25, 0.25]) - 1.0397207708399179) < 1e-9

    def test_bounds_random(self):
        for _ in range(40):
            v = RNG.integers(2, 30)
            p = softmax(RNG.standard_normal(v) * 3)
            h = entropy(p)
            assert -1e-12 <= h <= math.log(v) + 1e-9

    def test_invalid_vector_rejected(self):
        with pytest.raises(ArgumentError):
            entropy([0.7, 0.7])


class TestCrossEntropy:
    def test_self_consistency_gibbs(self):
        for _ in range(20):
            z = RNG.standard_normal(9) * 4
            p = softmax(z)
            assert abs(cross_entropy(z, p) - entropy(p)) < 1e-5

    def test_one_hot_reduction(self):
        z = np.array([0.3, -1.2, 2.0, 0.0])
        t = np.array([0.0, 0.0, 1.0, 0.0])
        assert abs(cross_entropy(z, t) + math.log(softmax(z)[2])) < 1e-9

    def test_random_vs_direct_oracle(self):
        z = RNG.standard_normal(8) * 3
        t = softmax(RNG.standard_normal(8))
        e = np.exp(z - z.max())
        p = e / e.sum()
        ref = float(-(t * np.log(p)).sum())
        assert abs(cross_entropy(z, t) - ref) < 1e-6

    def test_saturated_logits_no_inf(self):
        z = np.array([800.0, -800.0])
        t = np.array([0.0, 1.0])
        val = cross_entropy(z, t)
        assert np.isfinite(val)
        assert val <= -math.log(1e-12) + 1e-6

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            cross_entropy([1.0, 2.0], [0.5, 0.25, 0.25])


class TestLayerNorm:
    def test_constant_input_zeros(self):
        out = layer_norm([3.0] * 6, [1.0] * 6, [0.0] * 6, 1e-5)
        assert np.allclose(out, 0.0)

    def test_unit_variance_case(self):
        out = layer_norm([1.0, -1.0], [1.0, 1.0], [0.0, 0.0], 0.0)
        assert np.allclose(out, [1.0, -1.0], atol=1e-6)

    def test_random_vs_double_oracle(self):
        x = RNG.standard_normal(16).astype(np.float32)
        g = RNG.standard_normal(16).astype(np.float32)
        b = RNG.standard_normal(16).astype(np.float32)
        x64 = x.astype(np.float64)
        ref = (x64 - x64.mean()) / np.sqrt(x64.var() + 1e-5) * g + b
        assert np.allclose(layer_norm(x, g, b, 1e-5), ref, atol=1e-5)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            layer_norm([1.0, 2.0], [1.0], [0.0], 1e-5)
