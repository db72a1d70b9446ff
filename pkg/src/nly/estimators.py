"""scikit-learn style wrappers.

The estimators are trained from group-level evidence, so ``fit`` takes the
instance features together with the group memberships and the observed
noisy label distributions::

    clf = NoisyLabelDistributionClassifier(alpha_c1=10).fit(X, groups, S)
    clf.labels_          # transductive label estimates for the rows of X
    clf.predict(X_new)   # inductive predictions

Hyperparameters are plain constructor arguments, so ``get_params``,
``set_params`` and ``sklearn.base.clone`` work as usual.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import baselines, inference
from ._validation import check_features, check_groups, check_noisy_dists
from .model import Dataset, Hyperparams, ModelParams, softmax


def _mean_over_groups(P, groups):
    return np.stack([P[g].mean(axis=0) for g in groups]) if len(groups) else np.zeros((0, P.shape[1]))


class _GroupDistMixin:
    def group_score(self, X, groups, noisy_dists):
        """Negative mean squared error between observed and predicted group distributions."""
        pred = self.predict_group_dists(X, groups)
        S = check_noisy_dists(noisy_dists, len(pred))
        return -float(np.mean((S - pred) ** 2))


class NoisyLabelDistributionClassifier(_GroupDistMixin, ClassifierMixin, BaseEstimator):
    """Multiclass softmax classifier learned from noisy group label distributions.

    Fitted attributes: ``coef_`` (M x D), ``confusion_`` (M x M),
    ``zeta_`` and ``eta_`` (responsibilities), ``labels_`` (argmax of
    ``zeta_``), ``elbo_trace_``, ``n_sweeps_``, ``converged_`` and
    ``result_`` (the full :class:`~nly.model.FitResult`).
    """

    def __init__(
        self,
        alpha_w=1.0,
        alpha_s=100.0,
        alpha_c0=1.0,
        alpha_c1=10.0,
        max_sweeps=500,
        tol=1e-7,
        eta_max_iters=1,
        init="unmixing",
        init_seed=0,
        audit=False,
    ):
        self.alpha_w = alpha_w
        self.alpha_s = alpha_s
        self.alpha_c0 = alpha_c0
        self.alpha_c1 = alpha_c1
        self.max_sweeps = max_sweeps
        self.tol = tol
        self.eta_max_iters = eta_max_iters
        self.init = init
        self.init_seed = init_seed
        self.audit = audit

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(self.alpha_w, self.alpha_s, self.alpha_c0, self.alpha_c1)

    def fit_config(self) -> inference.FitConfig:
        return inference.FitConfig(
            max_sweeps=self.max_sweeps,
            elbo_rel_tol=self.tol,
            eta_max_iters=self.eta_max_iters,
            init=self.init,
            init_seed=self.init_seed,
            audit=self.audit,
        )

    def fit(self, X, groups, noisy_dists, callback=None):
        X = check_features(X)
        groups = check_groups(groups, X.shape[0])
        S = check_noisy_dists(noisy_dists, len(groups))
        result = inference.fit(Dataset(X, groups, S), self.hyperparams(), self.fit_config(), callback=callback)
        return self._set_result(result)

    def _set_result(self, result):
        self.result_ = result
        self.coef_ = result.params.weights
        self.confusion_ = result.params.confusion
        self.zeta_ = result.varparams.zeta
        self.eta_ = result.varparams.eta
        self.labels_ = result.predicted_labels
        self.elbo_trace_ = list(result.elbo_trace)
        self.n_sweeps_ = result.sweeps
        self.converged_ = result.converged
        self.classes_ = np.arange(self.coef_.shape[0])
        self.n_features_in_ = self.coef_.shape[1]
        return self

    @property
    def params_(self) -> ModelParams:
        check_is_fitted(self, "coef_")
        return ModelParams(self.coef_, self.confusion_)

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        return check_features(X) @ self.coef_.T

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def predict_group_dists(self, X, groups):
        """Expected noisy distribution per group: the confusion channel applied
        to the members' mean class probabilities."""
        P = self.predict_proba(X)
        groups = check_groups(groups, P.shape[0])
        return _mean_over_groups(P, groups) @ self.confusion_


class _RegressionBaseline(_GroupDistMixin, BaseEstimator):
    def fit(self, X, groups, noisy_dists):
        X = check_features(X)
        groups = check_groups(groups, X.shape[0])
        S = check_noisy_dists(noisy_dists, len(groups))
        self.model_ = self._fit_pairs(baselines.build_pairs(Dataset(X, groups, S)))
        self.coef_ = self.model_.coef
        self.intercept_ = self.model_.intercept
        self.classes_ = np.arange(self.coef_.shape[0])
        self.labels_ = self.predict(X)
        return self

    def predict_dists(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(check_features(X))

    def predict(self, X):
        return np.argmax(self.predict_dists(X), axis=1)

    def predict_group_dists(self, X, groups):
        P = self.predict_dists(X)
        return _mean_over_groups(P, check_groups(groups, P.shape[0]))


class RidgeDistributionRegressor(_RegressionBaseline):
    """Per-output ridge regression from instance features to group distributions."""

    def __init__(self, lam=1.0):
        self.lam = lam

    def _fit_pairs(self, pairs):
        return baselines.ridge_fit(pairs, self.lam)


class MultiTaskElasticNetDistributionRegressor(_RegressionBaseline):
    """Multi-task elastic net from instance features to group distributions."""

    def __init__(self, alpha=0.01, l1_ratio=0.5, tol=1e-8, max_iter=10000):
        self.alpha = alpha
        self.l1_ratio = l1_ratio
        self.tol = tol
        self.max_iter = max_iter

    def _fit_pairs(self, pairs):
        return baselines.mten_fit(pairs, self.alpha, self.l1_ratio, tol=self.tol, max_iter=self.max_iter)
