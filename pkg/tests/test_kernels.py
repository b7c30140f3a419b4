"""Kernel evaluation, batched similarity, and Gram matrix behavior."""

import numpy as np
import pytest

from nnkmeans import DataError, FeatureMatrix, KernelSpec, cross_similarity, gram, kernel_eval
from nnkmeans.kernels import self_similarity

GAUSS = KernelSpec("gaussian", 1.0)
COSINE = KernelSpec("cosine")
LINEAR = KernelSpec("linear")


class TestKernelEval:
    def test_gaussian_self_similarity_is_one(self):
        x = np.array([0.3, -1.2, 4.0])
        assert kernel_eval(x, x, GAUSS) == 1.0

    def test_gaussian_known_distance(self):
        # ||x - y||^2 = 2 exactly
        x = np.array([1.0, 1.0])
        y = np.array([0.0, 0.0])
        assert kernel_eval(x, y, GAUSS) == pytest.approx(np.exp(-1.0), abs=1e-15)

    def test_gaussian_bandwidth(self):
        x = np.array([2.0])
        y = np.array([0.0])
        spec = KernelSpec("gaussian", sigma=2.0)
        assert kernel_eval(x, y, spec) == pytest.approx(np.exp(-0.5), abs=1e-15)

    def test_cosine_orthogonal(self):
        assert kernel_eval([1.0, 0.0], [0.0, 1.0], COSINE) == 0.0

    def test_cosine_self(self):
        x = np.array([0.4, -2.0, 1.0])
        assert kernel_eval(x, x, COSINE) == pytest.approx(1.0, abs=1e-15)

    def test_linear_is_dot_product(self):
        x = np.array([1.0, 2.0])
        y = np.array([3.0, -1.0])
        assert kernel_eval(x, y, LINEAR) == 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            kernel_eval([1.0, 2.0], [1.0], GAUSS)

    def test_cosine_zero_vector_rejected(self):
        with pytest.raises(DataError):
            kernel_eval([0.0, 0.0], [1.0, 0.0], COSINE)

    def test_bitwise_symmetry_all_kinds(self):
        rng = np.random.default_rng(0)
        for spec in (GAUSS, COSINE, LINEAR):
            for _ in range(50):
                x = rng.normal(size=4)
                y = rng.normal(size=4)
                assert kernel_eval(x, y, spec) == kernel_eval(y, x, spec)

    def test_gaussian_bounds(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            x = rng.normal(size=3)
            y = rng.normal(size=3)
            v = kernel_eval(x, y, GAUSS)
            assert 0.0 < v <= 1.0
            assert (v == 1.0) == bool(np.array_equal(x, y))


class TestKernelSpec:
    def test_parse_grammar(self):
        assert KernelSpec.parse("gaussian:sigma=0.5") == KernelSpec("gaussian", 0.5)
        assert KernelSpec.parse("cosine") == KernelSpec("cosine")
        assert KernelSpec.parse("linear") == KernelSpec("linear")
        assert KernelSpec.parse("gaussian") == KernelSpec("gaussian", 1.0)

    @pytest.mark.parametrize("bad", ["rbf", "gaussian:sigma=", "gaussian:gamma=1", "cosine:sigma=1", "gaussian:sigma=abc"])
    def test_parse_rejects(self, bad):
        with pytest.raises(ValueError):
            KernelSpec.parse(bad)

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            KernelSpec("gaussian", 0.0)

    def test_roundtrip_dict(self):
        spec = KernelSpec("gaussian", 0.7)
        assert KernelSpec.from_dict(spec.to_dict()) == spec


class TestFeatureMatrix:
    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            FeatureMatrix(np.array([[1.0, np.nan]]))

    def test_rejects_bad_labels(self):
        with pytest.raises(DataError):
            FeatureMatrix(np.ones((2, 3)), labels=np.array([0, 1]))
        with pytest.raises(DataError):
            FeatureMatrix(np.ones((2, 3)), labels=np.array([0, -1, 2]))
        with pytest.raises(DataError):
            FeatureMatrix(np.ones((2, 2)), labels=np.array([0.5, 1.0]))

    def test_n_classes(self):
        fm = FeatureMatrix(np.ones((2, 4)), labels=np.array([0, 2, 1, 0]))
        assert fm.n_classes == 3


class TestCrossSimilarity:
    def test_single_point_gaussian(self):
        p = np.array([[1.0], [2.0]])
        out = cross_similarity(p, p, GAUSS)
        assert out.shape == (1, 1)
        assert out[0, 0] == 1.0

    def test_linear_is_matrix_product(self):
        rng = np.random.default_rng(2)
        q = rng.normal(size=(3, 5))
        s = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(cross_similarity(q, s, LINEAR), q.T @ s)

    @pytest.mark.parametrize("spec", [GAUSS, COSINE, LINEAR])
    def test_matches_scalar_loop(self, spec):
        rng = np.random.default_rng(3)
        q = rng.normal(size=(3, 5))
        s = rng.normal(size=(3, 4))
        out = cross_similarity(q, s, spec)
        for i in range(5):
            for j in range(4):
                assert out[i, j] == pytest.approx(kernel_eval(q[:, i], s[:, j], spec), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            cross_similarity(np.ones((3, 2)), np.ones((2, 2)), GAUSS)

    def test_self_similarity_linear(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 6))
        np.testing.assert_allclose(self_similarity(x, LINEAR), np.einsum("ij,ij->j", x, x), rtol=1e-15)
        np.testing.assert_array_equal(self_similarity(x, GAUSS), np.ones(6))


class TestGram:
    def test_single_sample(self):
        fm = FeatureMatrix(np.array([[2.0], [1.0]]))
        view = gram(fm, GAUSS)
        assert view.cache.shape == (1, 1)
        assert view.cache[0, 0] == 1.0

    def test_duplicate_columns_give_identical_rows(self):
        x = np.array([[1.0, 1.0, 2.0], [0.5, 0.5, -1.0]])
        view = gram(FeatureMatrix(x), GAUSS)
        np.testing.assert_array_equal(view.cache[0], view.cache[1])

    def test_matches_cross_similarity(self):
        rng = np.random.default_rng(5)
        fm = FeatureMatrix(rng.normal(size=(4, 6)))
        view = gram(fm, GAUSS)
        np.testing.assert_allclose(view.cache, cross_similarity(fm.data, fm.data, GAUSS), atol=1e-12)

    @pytest.mark.parametrize("spec", [GAUSS, LINEAR])
    def test_psd_small(self, spec):
        rng = np.random.default_rng(6)
        for n in (5, 12, 20):
            fm = FeatureMatrix(rng.normal(size=(3, n)))
            eig = np.linalg.eigvalsh(gram(fm, spec).cache)
            assert eig.min() >= -1e-8

    def test_cap_exceeded_suggests_on_the_fly(self):
        fm = FeatureMatrix(np.random.default_rng(7).normal(size=(2, 10)))
        with pytest.raises(DataError, match="materialize=False"):
            gram(fm, GAUSS, cap=5)

    def test_on_the_fly_matches_cache(self):
        rng = np.random.default_rng(8)
        fm = FeatureMatrix(rng.normal(size=(3, 7)))
        cached = gram(fm, GAUSS)
        lazy = gram(fm, GAUSS, materialize=False)
        assert lazy.cache is None
        np.testing.assert_array_equal(lazy.row(3), cached.cache[3])
        np.testing.assert_array_equal(lazy.block(2, 5), cached.cache[2:5])
        np.testing.assert_array_equal(lazy.full(), cached.cache)
        np.testing.assert_allclose(lazy.diagonal(), np.diag(cached.cache), atol=1e-15)
