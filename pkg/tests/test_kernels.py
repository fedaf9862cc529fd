import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lte_lab.errors import DataError, NumericalError
from lte_lab.kernels import (
    ChannelSet,
    KernelSpec,
    chi2_distance,
    chi2_distances,
    default_gamma,
    fit_kernel,
    fusion_gram,
    gram,
    mean_chi2,
    save_gram,
)

nonneg_vectors = hnp.arrays(np.float64, st.integers(1, 6), elements=st.floats(0, 10))


def pair_vectors(n, C, seed):
    """Rows made of (p, 1 - p) pairs, like LTE vectors."""
    p = np.random.default_rng(seed).random((n, C - 1))
    out = np.empty((n, 2 * (C - 1)))
    out[:, 0::2], out[:, 1::2] = p, 1 - p
    return out


class TestChi2Distance:
    def test_identity(self):
        assert chi2_distance([0.2, 0.0, 3.0], [0.2, 0.0, 3.0]) == 0.0

    def test_half_convention(self):
        assert chi2_distance([1, 0], [0, 1]) == pytest.approx(1.0)

    def test_zero_zero_terms(self):
        assert chi2_distance([0, 0, 2], [0, 0, 1]) == pytest.approx(0.5 * 1 / 3)

    def test_negative_rejected(self):
        with pytest.raises(DataError):
            chi2_distance([-1, 0], [0, 1])

    def test_length_mismatch(self):
        with pytest.raises(DataError):
            chi2_distance([1, 0], [0, 1, 2])

    @given(st.integers(1, 6).flatmap(lambda d: st.tuples(
        hnp.arrays(np.float64, d, elements=st.floats(0, 10)),
        hnp.arrays(np.float64, d, elements=st.floats(0, 10)))))
    def test_symmetric_nonnegative(self, uv):
        u, v = uv
        d = chi2_distance(u, v)
        assert d >= 0
        assert d == pytest.approx(chi2_distance(v, u), rel=1e-12, abs=1e-300)

    @given(st.integers(1, 6).flatmap(lambda d: st.tuples(
        hnp.arrays(np.float64, d, elements=st.floats(0.01, 10)),
        hnp.arrays(np.float64, d, elements=st.floats(0.01, 10)))))
    def test_zero_iff_equal(self, uv):
        u, v = uv
        assert (chi2_distance(u, v) == 0) == np.array_equal(u, v)

    def test_matrix_matches_pairwise(self):
        X = np.random.default_rng(0).random((70, 5))
        Y = np.random.default_rng(1).random((9, 5))
        D = chi2_distances(X, Y)
        assert D.shape == (70, 9)
        for i, j in [(0, 0), (69, 8), (33, 4)]:
            assert D[i, j] == pytest.approx(chi2_distance(X[i], Y[j]), rel=1e-13)


class TestMeanChi2:
    def test_two_rows(self):
        assert mean_chi2([[1, 0], [0, 1]]) == pytest.approx(1.0)

    def test_three_rows(self):
        X = np.array([[2.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
        D = chi2_distances(X)
        np.testing.assert_allclose(D[np.triu_indices(3, 1)], [1.0, 2.0, 1.0])
        assert mean_chi2(X) == pytest.approx(4.0 / 3.0)

    def test_identical_rows(self):
        with pytest.raises(NumericalError):
            mean_chi2(np.ones((4, 3)))

    def test_one_row(self):
        with pytest.raises(DataError):
            mean_chi2([[1.0, 2.0]])


class TestGram:
    def test_linear_orthonormal(self):
        np.testing.assert_array_equal(gram("linear", np.eye(4)), np.eye(4))

    def test_hist_on_pair_vectors(self):
        X = pair_vectors(6, 5, seed=0)
        np.testing.assert_allclose(np.diag(gram("hist", X)), 4.0, atol=1e-12)

    def test_hist_min_sum(self):
        K = gram("hist", [[1.0, 3.0]], [[2.0, 1.0], [0.0, 5.0]])
        np.testing.assert_array_equal(K, [[2.0, 3.0]])

    @pytest.mark.parametrize("kind", ["rbf", "chi2"])
    def test_unit_diagonal(self, kind):
        X = np.random.default_rng(3).random((20, 6)) * 5
        np.testing.assert_array_equal(np.diag(gram(kind, X)), 1.0)

    def test_rbf_formula(self):
        X = np.array([[0.0, 0.0], [1.0, 2.0]])
        spec = KernelSpec("rbf", gamma=0.3)
        np.testing.assert_allclose(gram(spec, X)[0, 1], np.exp(-0.3 * 5.0), rtol=1e-14)

    def test_default_gamma(self):
        X = np.array([[0.0, 0.0], [2.0, 4.0]])
        # feature variances 1 and 4, mean 2.5, dimension 2
        assert default_gamma(X) == pytest.approx(1.0 / 5.0)
        assert fit_kernel("rbf", X, gamma_scale=2.0).gamma == pytest.approx(2.0 / 5.0)

    def test_chi2_uses_training_mean(self):
        X = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        spec = fit_kernel("chi2", X)
        assert spec.mean_distances == (pytest.approx(mean_chi2(X)),)
        T = np.array([[0.5, 0.5]])
        np.testing.assert_allclose(gram(spec, T, X), np.exp(-chi2_distances(T, X) / mean_chi2(X)))

    @pytest.mark.parametrize("kind", ["chi2", "hist"])
    def test_negative_inputs(self, kind):
        with pytest.raises(DataError, match="nonnegative"):
            gram(kind, np.array([[1.0, -0.1], [0.0, 1.0]]))

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            gram("linear", np.ones((2, 3)), np.ones((2, 4)))

    def test_unknown_kind(self):
        with pytest.raises(DataError):
            gram("poly", np.ones((2, 2)))

    @pytest.mark.parametrize("kind", ["linear", "chi2", "hist", "rbf"])
    def test_symmetric(self, kind):
        X = np.random.default_rng(4).random((15, 4))
        K = gram(kind, X)
        np.testing.assert_allclose(K, K.T, rtol=0, atol=1e-14)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10**6), kind=st.sampled_from(["rbf", "chi2", "fusion"]))
    def test_psd(self, seed, kind):
        rng = np.random.default_rng(seed)
        X = rng.random((50, 6))
        K = gram(kind, [X, rng.random((50, 3))] if kind == "fusion" else X)
        assert np.linalg.eigvalsh(K).min() >= -1e-8

    def test_spec_round_trip(self):
        spec = KernelSpec("fusion", mean_distances=(1.5, 0.25))
        assert KernelSpec.from_dict(spec.to_dict()) == spec

    @pytest.mark.parametrize("kwargs", [{"kind": "rbf"}, {"kind": "chi2"}, {"kind": "fusion", "mean_distances": (1.0, 0.0)}])
    def test_spec_validation(self, kwargs):
        with pytest.raises(DataError):
            KernelSpec(**kwargs)


class TestFusion:
    def test_single_channel_equals_chi2(self):
        X = np.random.default_rng(0).random((30, 5))
        T = np.random.default_rng(1).random((7, 5))
        cs = ChannelSet.from_training([X])
        np.testing.assert_allclose(fusion_gram(cs), gram("chi2", X), rtol=0, atol=1e-12)
        spec = fit_kernel("chi2", X)
        np.testing.assert_allclose(fusion_gram([T], [X], cs.normalizers), gram(spec, T, X), rtol=0, atol=1e-12)

    def test_unit_diagonal(self):
        rng = np.random.default_rng(2)
        cs = ChannelSet.from_training([rng.random((12, 4)), rng.random((12, 6))])
        np.testing.assert_array_equal(np.diag(fusion_gram(cs)), 1.0)

    def test_duplicate_channel_squares(self):
        X = np.random.default_rng(3).random((10, 4))
        d = mean_chi2(X)
        K1 = fusion_gram([X], normalizers=[d])
        K2 = fusion_gram([X, X], normalizers=[d, d])
        np.testing.assert_allclose(K2, K1**2, rtol=1e-12)

    def test_product_of_channels(self):
        rng = np.random.default_rng(4)
        chans = [rng.random((9, 3)), rng.random((9, 5)), rng.random((9, 2))]
        cs = ChannelSet.from_training(chans)
        prod = np.prod([fusion_gram([c], normalizers=[d]) for c, d in zip(chans, cs.normalizers)], axis=0)
        np.testing.assert_allclose(fusion_gram(cs), prod, rtol=1e-12)

    def test_gram_dispatch(self):
        rng = np.random.default_rng(5)
        chans = [rng.random((8, 3)), rng.random((8, 2))]
        np.testing.assert_allclose(gram("fusion", chans), fusion_gram(ChannelSet.from_training(chans)))

    def test_missing_channel(self):
        rng = np.random.default_rng(6)
        cs = ChannelSet.from_training([rng.random((5, 3)), rng.random((5, 2))])
        with pytest.raises(DataError, match="missing channel"):
            fusion_gram(cs, [rng.random((2, 3))])

    def test_channel_length_mismatch(self):
        with pytest.raises(DataError):
            ChannelSet((np.ones((3, 2)), np.ones((4, 2))), (1.0, 1.0))


def test_save_gram(tmp_path):
    save_gram(tmp_path / "g.csv", np.array([[1.0, 0.5]]), ["r"], ["a", "b"])
    assert (tmp_path / "g.csv").read_text() == ",a,b\nr,1.0,0.5\n"
