import numpy as np
import pytest

from tginee.covariance import (
    WorkingCovariance,
    default_ridge,
    estimate_w_pooled,
    pair_sigma_inverse_apply,
    pair_variance,
    read_w_csv,
    standardized_residual,
    write_w_csv,
)
from tginee.errors import CovarianceSingularError, InsufficientDataError


def exact(M, W=None):
    wc = WorkingCovariance(M, ridge_eps=0.0)
    if W is not None:
        wc.set_W(W)
    return wc


class TestSigmaInverse:
    def test_identity_examples(self):
        np.testing.assert_allclose(pair_sigma_inverse_apply(exact(2), [0.25, 0.25], [1, -1]), [4, -4], rtol=1e-14)
        np.testing.assert_allclose(pair_sigma_inverse_apply(exact(2), [0.25, 0.16], [1, 1]), [4, 6.25], rtol=1e-14)

    def test_correlated_example(self):
        wc = exact(2, [[1, 0.5], [0.5, 1]])
        np.testing.assert_allclose(pair_sigma_inverse_apply(wc, [1, 1], [1, 0]), [4 / 3, -2 / 3], rtol=1e-14)

    def test_identity_reduces_to_division(self, rng):
        gv = rng.uniform(0.05, 0.25, size=(20, 4))
        v = rng.normal(size=(20, 4))
        np.testing.assert_allclose(pair_sigma_inverse_apply(exact(4), gv, v), v / gv, rtol=1e-12)

    def test_reconstruction_on_random_spd(self, rng):
        M = 4
        A = rng.normal(size=(M, M))
        W = A @ A.T + 0.1 * np.eye(M)
        wc = WorkingCovariance(M)
        wc.set_W(W)
        gv = rng.uniform(0.05, 0.25, size=M)
        v = rng.normal(size=M)
        out = pair_sigma_inverse_apply(wc, gv, v)
        lhs = (W + wc.ridge_eps * np.eye(M)) @ (out * np.sqrt(gv))
        np.testing.assert_allclose(lhs, v / np.sqrt(gv), atol=1e-8)

    def test_singular_raises(self):
        wc = exact(2, [[1, 1], [1, 1]])
        with pytest.raises(CovarianceSingularError):
            wc.solve([1.0, 0.0])

    def test_ridge_makes_singular_usable(self):
        wc = WorkingCovariance(2)
        wc.set_W([[1, 1], [1, 1]])
        assert np.all(np.isfinite(wc.solve([1.0, 0.0])))

    def test_restricted_inverse(self, rng):
        A = rng.normal(size=(4, 4))
        W = A @ A.T + np.eye(4)
        wc = exact(4, W)
        R = wc.restricted_inverse([0, 2])
        np.testing.assert_allclose(R[np.ix_([0, 2], [0, 2])], np.linalg.inv(W[np.ix_([0, 2], [0, 2])]), rtol=1e-12)
        assert np.all(R[[1, 3]] == 0) and np.all(R[:, [1, 3]] == 0)


class TestResiduals:
    def test_examples(self):
        np.testing.assert_array_equal(standardized_residual([0.2], [0.3], [0.3]), [0.0])
        np.testing.assert_allclose(standardized_residual([0.25], [1], [0.5]), [1.0])
        np.testing.assert_allclose(standardized_residual([0.16], [0], [0.2]), [-0.5])

    def test_pair_variance(self):
        np.testing.assert_allclose(pair_variance([0.5, 0.2]), [0.25, 0.16])


class TestEstimateW:
    def test_examples(self):
        np.testing.assert_array_equal(estimate_w_pooled(np.array([[1.0, -1.0]])), [[1, -1], [-1, 1]])
        np.testing.assert_array_equal(estimate_w_pooled(np.eye(2)), [[0.5, 0], [0, 0.5]])
        np.testing.assert_array_equal(estimate_w_pooled(np.zeros((3, 2))), np.zeros((2, 2)))

    def test_matches_dense_accumulation(self, rng):
        r = rng.normal(size=(200, 3))
        dense = sum(np.outer(x, x) for x in r) / 200
        blocks = (r[k : k + 17] for k in range(0, 200, 17))
        np.testing.assert_allclose(estimate_w_pooled(blocks, 200), dense, atol=1e-10)

    def test_empty_stream(self):
        with pytest.raises(InsufficientDataError):
            estimate_w_pooled(iter([]))


class TestMomentum:
    def test_examples(self):
        wc = WorkingCovariance(2, momentum_mu=0.9)
        np.testing.assert_allclose(wc.momentum_update(np.eye(2)).W, np.eye(2))
        np.testing.assert_allclose(WorkingCovariance(2).momentum_update(np.zeros((2, 2))).W, 0.9 * np.eye(2))
        wc = WorkingCovariance(2, momentum_mu=0.5)
        wc.set_W(np.zeros((2, 2)))
        np.testing.assert_allclose(wc.momentum_update([[1, 0.5], [0.5, 1]]).W, [[0.5, 0.25], [0.25, 0.5]])

    def test_geometric_convergence(self, rng):
        A = rng.normal(size=(3, 3))
        target = A @ A.T
        wc = WorkingCovariance(3, momentum_mu=0.9)
        start = np.linalg.norm(wc.W - target)
        for t in range(1, 30):
            wc.momentum_update(target)
            assert np.array_equal(wc.W, wc.W.T)
            assert np.linalg.norm(wc.W - target) <= 0.9**t * start * (1 + 1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            WorkingCovariance(2).momentum_update(np.eye(3))

    def test_cache_invalidated(self):
        wc = exact(2)
        before = wc.solve([1.0, 1.0])
        wc.set_W(2 * np.eye(2))
        np.testing.assert_allclose(wc.solve([1.0, 1.0]), before / 2)


class TestRidgeAndIO:
    def test_default_ridge(self):
        assert default_ridge(np.eye(3)) == pytest.approx(1e-4)
        assert default_ridge(np.zeros((2, 2))) == 1e-8

    def test_reset_is_identity(self):
        wc = WorkingCovariance(3)
        wc.set_W(2 * np.eye(3))
        np.testing.assert_array_equal(wc.reset().W, np.eye(3))

    def test_csv_six_significant_digits(self, tmp_path):
        W = np.array([[0.123456789, -1.5], [-1.5, 2.0]])
        write_w_csv(W, tmp_path / "W.csv")
        assert (tmp_path / "W.csv").read_text().splitlines()[0] == "0.123457,-1.5"
        np.testing.assert_allclose(read_w_csv(tmp_path / "W.csv"), W, rtol=1e-5)

    def test_normalize_correlation(self):
        wc = WorkingCovariance(2, normalize_correlation=True)
        wc.set_W([[4.0, 1.0], [1.0, 1.0]])
        np.testing.assert_allclose(wc.W, [[1.0, 0.5], [0.5, 1.0]])
