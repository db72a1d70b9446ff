import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.linear_model import MultiTaskElasticNet, Ridge

from nly.baselines import (
    LinearModel,
    RankDeficientError,
    RegressionPairs,
    build_pairs,
    mten_alpha_max,
    mten_fit,
    mten_objective,
    regress_predict_label,
    ridge_fit,
)
from nly.model import Dataset


def _pairs(seed, n=60, D=4, M=3, noise=0.1):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, D))
    Y = X @ rng.normal(size=(D, M)) + 0.3 + noise * rng.normal(size=(n, M))
    return RegressionPairs(X, Y)


def test_build_pairs_group_major():
    ds = Dataset(np.arange(6.0).reshape(3, 2), [[0, 2], [1]], np.array([[0.5, 0.5], [1.0, 0.0]]))
    p = build_pairs(ds)
    np.testing.assert_array_equal(p.inputs, [[0, 1], [4, 5], [2, 3]])
    np.testing.assert_array_equal(p.targets, [[0.5, 0.5], [0.5, 0.5], [1.0, 0.0]])
    assert p.count == 3


class TestRidge:
    def test_hand_example(self):
        # centred x = (-1, 0, 1), y = (0, 1, 2): slope 2/(2+lam)
        p = RegressionPairs(np.array([[0.0], [1.0], [2.0]]), np.array([[0.0], [1.0], [2.0]]))
        m = ridge_fit(p, 1.0)
        assert m.coef[0, 0] == pytest.approx(2 / 3, abs=1e-14)
        assert m.intercept[0] == pytest.approx(1 - 2 / 3, abs=1e-14)

    def test_huge_penalty_predicts_target_mean(self):
        p = _pairs(0)
        m = ridge_fit(p, 1e12)
        np.testing.assert_allclose(m.predict(p.inputs), np.broadcast_to(p.targets.mean(0), p.targets.shape), atol=1e-6)

    @pytest.mark.parametrize("lam", [0.0, 0.5, 10.0])
    def test_normal_equations(self, lam):
        p = _pairs(1)
        m = ridge_fit(p, lam)
        R = p.targets - m.predict(p.inputs)
        np.testing.assert_allclose(p.inputs.T @ R, lam * m.coef.T, atol=1e-9)
        np.testing.assert_allclose(R.sum(axis=0), 0.0, atol=1e-9)

    def test_local_optimality(self):
        p = _pairs(2)
        lam = 0.7
        m = ridge_fit(p, lam)

        def obj(coef, b):
            R = p.targets - p.inputs @ coef.T - b
            return np.sum(R * R) + lam * np.sum(coef * coef)

        base = obj(m.coef, m.intercept)
        rng = np.random.default_rng(0)
        for _ in range(20):
            dc, db = 1e-4 * rng.normal(size=m.coef.shape), 1e-4 * rng.normal(size=m.intercept.shape)
            assert obj(m.coef + dc, m.intercept + db) >= base

    @pytest.mark.parametrize("lam", [0.01, 1.0, 100.0])
    def test_matches_sklearn(self, lam):
        p = _pairs(3)
        ref = Ridge(alpha=lam).fit(p.inputs, p.targets)
        m = ridge_fit(p, lam)
        np.testing.assert_allclose(m.coef, ref.coef_, atol=1e-10)
        np.testing.assert_allclose(m.intercept, ref.intercept_, atol=1e-10)

    def test_rank_deficient(self):
        X = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]])
        p = RegressionPairs(X, np.ones((3, 2)))
        with pytest.raises(RankDeficientError):
            ridge_fit(p, 0.0)
        assert np.all(np.isfinite(ridge_fit(p, 1e-3).coef))

    def test_negative_penalty(self):
        with pytest.raises(ValueError):
            ridge_fit(_pairs(0), -1.0)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.floats(-5, 5))
    def test_intercept_absorbs_target_shift(self, seed, shift):
        p = _pairs(seed, n=20)
        a = ridge_fit(p, 0.5)
        b = ridge_fit(RegressionPairs(p.inputs, p.targets + shift), 0.5)
        np.testing.assert_allclose(b.coef, a.coef, atol=1e-9)
        np.testing.assert_allclose(b.intercept, a.intercept + shift, atol=1e-9)


class TestMten:
    @pytest.mark.parametrize("alpha,l1_ratio", [(0.01, 0.5), (0.05, 0.9), (0.001, 0.1)])
    def test_matches_sklearn(self, alpha, l1_ratio):
        p = _pairs(4)
        ref = MultiTaskElasticNet(alpha=alpha, l1_ratio=l1_ratio, tol=1e-12, max_iter=100000).fit(p.inputs, p.targets)
        m = mten_fit(p, alpha, l1_ratio, tol=1e-12)
        assert m.converged
        np.testing.assert_allclose(m.coef, ref.coef_, atol=1e-7)
        np.testing.assert_allclose(m.intercept, ref.intercept_, atol=1e-7)

    def test_zero_penalty_is_least_squares(self):
        p = _pairs(5)
        np.testing.assert_allclose(mten_fit(p, 0.0, 0.5, tol=1e-14).coef, ridge_fit(p, 0.0).coef, atol=1e-8)

    def test_pure_l2_is_scaled_ridge(self):
        p = _pairs(6)
        alpha = 0.2
        m = mten_fit(p, alpha, 0.0, tol=1e-14)
        np.testing.assert_allclose(m.coef, ridge_fit(p, alpha * p.count).coef, atol=1e-8)

    def test_group_sparsity(self):
        p = _pairs(7, D=6)
        amax = mten_alpha_max(p, 0.5)
        assert np.all(mten_fit(p, 10 * amax, 0.5).coef == 0)
        assert np.all(mten_fit(p, 1.0001 * amax, 0.5).coef == 0)
        assert np.any(mten_fit(p, 0.9 * amax, 0.5).coef != 0)

    def test_whole_columns_vanish(self):
        rng = np.random.default_rng(8)
        X = rng.normal(size=(200, 6))
        Y = X[:, :2] @ rng.normal(size=(2, 3)) + 0.01 * rng.normal(size=(200, 3))
        m = mten_fit(RegressionPairs(X, Y), 0.05, 0.9)
        zero_cols = np.all(m.coef == 0, axis=0)
        assert zero_cols.sum() >= 4
        assert not zero_cols[:2].any()

    def test_objective_decreases_with_iterations(self):
        p = _pairs(9)
        values = [mten_objective(p, mten_fit(p, 0.02, 0.5, tol=0, max_iter=k), 0.02, 0.5) for k in (1, 2, 4, 8, 50)]
        assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))

    def test_duplicated_rows(self):
        p = _pairs(10)
        doubled = RegressionPairs(np.vstack([p.inputs, p.inputs]), np.vstack([p.targets, p.targets]))
        np.testing.assert_allclose(mten_fit(doubled, 0.02, 0.5, tol=1e-13).coef, mten_fit(p, 0.02, 0.5, tol=1e-13).coef, atol=1e-9)

    def test_reports_non_convergence(self):
        m = mten_fit(_pairs(11), 1e-4, 0.5, tol=0.0, max_iter=3)
        assert not m.converged and m.n_iter == 3

    @pytest.mark.parametrize("alpha,l1", [(-1.0, 0.5), (0.1, 1.5)])
    def test_validation(self, alpha, l1):
        with pytest.raises(ValueError):
            mten_fit(_pairs(0), alpha, l1)


def test_predict_label():
    m = LinearModel(np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]), np.array([0.0, 0.0, 0.5]))
    np.testing.assert_array_equal(regress_predict_label(m, [[2.0, 1.0], [0.0, 1.0], [0.1, 0.2]]), [0, 1, 2])
    # ties go to the lowest class index
    assert regress_predict_label(m, [[1.0, 1.0]])[0] == 0
