import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nly.model import (
    Dataset,
    Hyperparams,
    ModelParams,
    VariationalParams,
    class_logits,
    elbo,
    elbo_terms,
    exact_log_marginal,
    expected_group_dist,
    log_prior_confusion,
    log_prior_weights,
    make_beta,
    softmax,
)
from nly.evaluation import _enumerable_instance, jensen_gap

finite = st.floats(-50, 50, allow_nan=False)


class TestMakeBeta:
    def test_diagonal_heavy(self):
        np.testing.assert_array_equal(make_beta(1, 10, 3), [[10, 1, 1], [1, 10, 1], [1, 1, 10]])

    def test_uniform(self):
        np.testing.assert_array_equal(make_beta(1, 1, 2), np.ones((2, 2)))

    def test_symmetric(self):
        np.testing.assert_array_equal(make_beta(5, 5, 4), np.full((4, 4), 5.0))

    @pytest.mark.parametrize("args", [(1, 1, 1), (0.5, 2, 3), (2, 0.9, 3)])
    def test_rejects(self, args):
        with pytest.raises(ValueError):
            make_beta(*args)


class TestClassLogits:
    def test_zero_weights(self):
        np.testing.assert_array_equal(class_logits(np.zeros((3, 2)), [1.5, -2.0]), np.zeros(3))

    def test_basis(self):
        np.testing.assert_array_equal(class_logits(np.eye(2), [3, -1]), [3, -1])

    def test_matches_dot_products(self):
        rng = np.random.default_rng(0)
        W, x = rng.normal(size=(2, 3)), rng.normal(size=3)
        expected = [sum(W[m, d] * x[d] for d in range(3)) for m in range(2)]
        np.testing.assert_allclose(class_logits(W, x), expected, rtol=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            class_logits(np.zeros((2, 3)), np.zeros(2))


class TestSoftmax:
    def test_zero_logits(self):
        np.testing.assert_allclose(softmax(np.zeros(4)), 0.25, rtol=0, atol=1e-15)

    def test_no_overflow(self):
        p = softmax([1000.0, 0.0])
        assert np.all(np.isfinite(p))
        assert p[0] == pytest.approx(1.0) and p[1] < 1e-300

    def test_hand_value(self):
        np.testing.assert_allclose(softmax([math.log(1), math.log(3)]), [0.25, 0.75], atol=1e-15)

    @given(arrays(float, st.integers(1, 8), elements=finite), st.floats(-100, 100))
    def test_simplex_and_shift_invariance(self, a, c):
        p = softmax(a)
        assert abs(p.sum() - 1) <= 1e-12
        np.testing.assert_allclose(softmax(a + c), p, atol=1e-12)
        assert np.argmax(softmax(a + c)) == np.argmax(p)


def _two_member_dataset(eta_rows):
    U = len(eta_rows)
    return Dataset(np.zeros((U, 1)), [np.arange(U)], np.zeros((1, 2)))


class TestExpectedGroupDist:
    @pytest.mark.parametrize(
        "rows, expected",
        [
            ([[1, 0], [0, 1]], [0.5, 0.5]),
            ([[0.3, 0.7]], [0.3, 0.7]),
            ([[1, 0], [1, 0], [0, 1]], [2 / 3, 1 / 3]),
        ],
    )
    def test_examples(self, rows, expected):
        ds = _two_member_dataset(rows)
        vp = VariationalParams(np.full((len(rows), 2), 0.5), np.array(rows, dtype=float))
        np.testing.assert_allclose(expected_group_dist(vp, ds, 0), expected, atol=1e-15)

    def test_missing_group(self):
        ds = _two_member_dataset([[1, 0]])
        vp = VariationalParams(np.full((1, 2), 0.5), np.array([[1.0, 0.0]]))
        with pytest.raises(KeyError):
            expected_group_dist(vp, ds, 3)

    @given(st.integers(1, 6), st.integers(2, 5), st.integers(0, 2**32 - 1))
    def test_convex_combination(self, n, M, seed):
        eta = np.random.default_rng(seed).dirichlet(np.ones(M), size=n)
        ds = Dataset(np.zeros((n, 1)), [np.arange(n)], np.zeros((1, M)))
        out = expected_group_dist(VariationalParams(np.full((n, M), 1 / M), eta), ds, 0)
        assert abs(out.sum() - 1) <= 1e-12
        assert np.all(out >= eta.min(axis=0) - 1e-15) and np.all(out <= eta.max(axis=0) + 1e-15)


class TestLogPriors:
    def test_standard_normal_at_zero(self):
        assert log_prior_weights(np.zeros((1, 1)), 1.0) == pytest.approx(-0.9189385332046727, abs=1e-15)

    def test_zero_weights_general(self):
        M, D, a = 3, 4, 2.5
        assert log_prior_weights(np.zeros((M, D)), a) == pytest.approx(M * D / 2 * (math.log(a) - math.log(2 * math.pi)))

    def test_quadratic_term(self):
        assert log_prior_weights(np.array([[2.0]]), 1.0) == pytest.approx(-0.9189385332046727 - 2.0, abs=1e-14)

    def test_rejects_nonpositive_precision(self):
        with pytest.raises(ValueError):
            log_prior_weights(np.zeros((1, 1)), 0.0)

    @given(st.integers(2, 5), st.integers(0, 2**32 - 1))
    def test_flat_dirichlet_is_constant(self, M, seed):
        C = np.random.default_rng(seed).dirichlet(np.ones(M), size=M)
        assert log_prior_confusion(C, np.ones((M, M))) == pytest.approx(M * math.lgamma(M), abs=1e-12)

    def test_beta22_at_half(self):
        C = np.array([[0.5, 0.5], [0.5, 0.5]])
        B = np.array([[2.0, 2.0], [1.0, 1.0]])
        # Beta(2, 2) density at 1/2 is 1.5; second row is flat on the 1-simplex with density 1
        assert log_prior_confusion(C, B) == pytest.approx(math.log(1.5), abs=1e-13)

    def test_boundary_is_minus_infinity(self):
        C = np.array([[1.0, 0.0], [0.5, 0.5]])
        assert log_prior_confusion(C, np.full((2, 2), 2.0)) == -math.inf


def _tiny():
    ds = Dataset(np.array([[0.5]]), [[0]], np.array([[1.0, 0.0]]))
    hyper = Hyperparams(alpha_w=1.0, alpha_s=1.0, alpha_c0=1.0, alpha_c1=2.0)
    params = ModelParams(np.array([[1.0], [-1.0]]), np.array([[0.8, 0.2], [0.3, 0.7]]))
    vp = VariationalParams(np.full((1, 2), 0.5), np.full((1, 2), 0.5))
    return ds, hyper, params, vp


class TestElbo:
    def test_hand_evaluation(self):
        ds, hyper, params, vp = _tiny()
        log2pi = math.log(2 * math.pi)
        a = [0.5, -0.5]
        lse = math.log(math.exp(0.5) + math.exp(-0.5))
        C = params.confusion
        # squared distance 0.5 plus variance 0.5, one group, M = 2, alpha_s = 1
        obs = -0.5 * (0.5 + 0.5) - log2pi
        channel = sum(0.25 * math.log(C[m, l]) for m in range(2) for l in range(2))
        classifier = sum(0.5 * (am - lse) for am in a)
        entropies = 2 * math.log(2)
        prior_w = -log2pi - 1.0
        prior_c = (math.log(2) + math.log(0.8)) + (math.log(2) + math.log(0.7))
        expected = obs + channel + classifier + entropies + prior_w + prior_c
        assert elbo(params, vp, ds, hyper) == pytest.approx(expected, abs=1e-12)

    def test_zero_kl_without_groups(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(1, 3))
        W = rng.normal(size=(3, 3))
        C = rng.dirichlet(np.full(3, 2.0), size=3)
        ds = Dataset(X, [], np.zeros((0, 3)))
        hyper = Hyperparams(alpha_c1=4.0)
        vp = VariationalParams(softmax(class_logits(W, X)), np.zeros((0, 3)))
        terms = elbo_terms(ModelParams(W, C), vp, ds, hyper)
        assert terms["classifier"] + terms["entropy_y"] == pytest.approx(0.0, abs=1e-12)
        assert elbo(ModelParams(W, C), vp, ds, hyper) == pytest.approx(terms["prior_w"] + terms["prior_c"], abs=1e-12)

    def test_jensen_bound_random_states(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            ds, hyper, state = _enumerable_instance(rng)
            assert jensen_gap(state, ds, hyper) >= -1e-9

    def test_permutation_invariance(self):
        rng = np.random.default_rng(3)
        U, M, D = 6, 3, 2
        X = rng.normal(size=(U, D))
        groups = [np.array([0, 2, 5]), np.array([1, 2]), np.array([3, 4, 5, 0])]
        S = rng.dirichlet(np.ones(M), size=3)
        ds = Dataset(X, groups, S)
        hyper = Hyperparams(alpha_s=5.0, alpha_c1=3.0)
        params = ModelParams(rng.normal(size=(M, D)), rng.dirichlet(np.full(M, 2.0), size=M))
        zeta = rng.dirichlet(np.ones(M), size=U)
        eta_by_pair = {(i, int(u)): rng.dirichlet(np.ones(M)) for i, g in enumerate(groups) for u in g}
        eta = np.array([eta_by_pair[(i, int(u))] for i, g in enumerate(groups) for u in g])
        base = elbo(params, VariationalParams(zeta, eta), ds, hyper)

        gperm = [2, 0, 1]
        ds_g = Dataset(X, [groups[i] for i in gperm], S[gperm])
        eta_g = np.array([eta_by_pair[(i, int(u))] for i in gperm for u in groups[i]])
        assert elbo(params, VariationalParams(zeta, eta_g), ds_g, hyper) == pytest.approx(base, rel=1e-13)

        perm = rng.permutation(U)  # new index k holds old instance perm[k]
        inv = np.argsort(perm)
        groups_u = [np.sort(inv[g]) for g in groups]
        eta_u = np.array([eta_by_pair[(i, int(perm[k]))] for i, g in enumerate(groups_u) for k in g])
        ds_u = Dataset(X[perm], groups_u, S)
        assert elbo(params, VariationalParams(zeta[perm], eta_u), ds_u, hyper) == pytest.approx(base, rel=1e-13)


def _independent_log_marginal(params, ds, hyper):
    """Sum over true labels, with each group's group-dependent labels summed separately."""
    M = params.confusion.shape[0]
    X, C = ds.features, params.confusion
    total = 0.0
    for y in itertools.product(range(M), repeat=ds.n_instances):
        py = 1.0
        for u in range(ds.n_instances):
            logits = [float(np.dot(params.weights[m], X[u])) for m in range(M)]
            top = max(logits)
            py *= math.exp(logits[y[u]] - top) / sum(math.exp(v - top) for v in logits)
        for i, g in enumerate(ds.groups):
            group_sum = 0.0
            for t in itertools.product(range(M), repeat=len(g)):
                pt = math.prod(C[y[u], tk] for u, tk in zip(g, t))
                mean = [sum(tk == m for tk in t) / len(g) for m in range(M)]
                sq = sum((ds.noisy_dists[i][m] - mean[m]) ** 2 for m in range(M))
                group_sum += pt * (hyper.alpha_s / (2 * math.pi)) ** (M / 2) * math.exp(-hyper.alpha_s / 2 * sq)
            py *= group_sum
        total += py
    return math.log(total)


class TestExactLogMarginal:
    def test_two_term_hand_case(self):
        ds = Dataset(np.array([[0.0]]), [[0]], np.array([[1.0, 0.0]]))
        params = ModelParams(np.zeros((2, 1)), np.eye(2))
        hyper = Hyperparams(alpha_s=1.0, alpha_c1=1.0)
        expected = math.log(0.5 / (2 * math.pi) * (1 + math.exp(-1)))
        assert expected == pytest.approx(-2.2178, abs=1e-4)
        assert exact_log_marginal(params, ds, hyper) == pytest.approx(expected, abs=1e-12)

    def test_limit_approaches_gaussian_normalizer(self):
        ds = Dataset(np.array([[1.0]]), [[0]], np.array([[1.0, 0.0, 0.0]]))
        params = ModelParams(np.array([[60.0], [0.0], [0.0]]), np.eye(3))
        hyper = Hyperparams(alpha_s=1e4, alpha_c1=1.0)
        normalizer = 1.5 * (math.log(1e4) - math.log(2 * math.pi))
        assert exact_log_marginal(params, ds, hyper) == pytest.approx(normalizer, abs=1e-12)

    def test_matches_independent_enumerator(self):
        rng = np.random.default_rng(11)
        for _ in range(8):
            ds, hyper, state = _enumerable_instance(rng)
            params = state.params()
            assert exact_log_marginal(params, ds, hyper) == pytest.approx(_independent_log_marginal(params, ds, hyper), abs=1e-9)

    def test_rejects_large_instances(self):
        ds = Dataset(np.zeros((10, 1)), [np.arange(10)], np.zeros((1, 4)))
        with pytest.raises(ValueError):
            exact_log_marginal(ModelParams(np.zeros((4, 1)), np.full((4, 4), 0.25)), ds, Hyperparams())


class TestValidation:
    def test_empty_group(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), [[]], np.zeros((1, 2)))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), [[0, 2]], np.zeros((1, 2)))

    def test_row_count(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), [[0]], np.zeros((2, 2)))

    def test_off_simplex_observations_allowed(self):
        ds = Dataset(np.zeros((2, 1)), [[0, 1]], np.array([[-0.2, 1.4]]))
        assert ds.n_classes == 2

    def test_bad_labels(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((2, 1)), [[0, 1]], np.zeros((1, 2)), true_labels=[0, 2])

    def test_confusion_rows_checked(self):
        with pytest.raises(ValueError):
            ModelParams(np.zeros((2, 1)), np.array([[0.5, 0.6], [0.5, 0.5]]))

    @pytest.mark.parametrize("kw", [{"alpha_w": 0}, {"alpha_s": -1}, {"alpha_c0": 0.5}, {"alpha_c1": 0.99}])
    def test_hyperparams(self, kw):
        with pytest.raises(ValueError):
            Hyperparams(**kw)
