"""Regression baselines that map an instance's features to the noisy label
distribution of every group it belongs to, then predict the class with the
largest regressed value."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .model import Dataset

logger = logging.getLogger(__name__)


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class RegressionPairs:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same number of rows")

    @property
    def count(self) -> int:
        return self.inputs.shape[0]


@dataclass(frozen=True, eq=False)
class LinearModel:
    coef: np.ndarray  # M x D
    intercept: np.ndarray  # M
    converged: bool = True
    n_iter: int = 0

    def predict(self, X) -> np.ndarray:
        return np.atleast_2d(X) @ self.coef.T + self.intercept


def build_pairs(dataset: Dataset) -> RegressionPairs:
    """One ``(x_u, s_i)`` row per membership, in group-major order."""
    mem = dataset.memberships
    return RegressionPairs(dataset.features[mem.pair_instance], dataset.noisy_dists[mem.pair_group])


def _center(pairs: RegressionPairs):
    x_mean = pairs.inputs.mean(axis=0)
    y_mean = pairs.targets.mean(axis=0)
    return pairs.inputs - x_mean, pairs.targets - y_mean, x_mean, y_mean


def ridge_fit(pairs: RegressionPairs, lam: float) -> LinearModel:
    """Independent ridge regression per output with an unpenalized intercept."""
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    Xc, Yc, x_mean, y_mean = _center(pairs)
    D = Xc.shape[1]
    A = Xc.T @ Xc + lam * np.eye(D)
    if lam == 0 and np.linalg.matrix_rank(Xc) < D:
        raise RankDeficientError("design matrix is rank deficient; use lam > 0")
    coef = np.linalg.solve(A, Xc.T @ Yc).T
    return LinearModel(coef, y_mean - coef @ x_mean)


def mten_objective(pairs: RegressionPairs, model: LinearModel, alpha: float, l1_ratio: float) -> float:
    n = pairs.count
    R = pairs.targets - model.predict(pairs.inputs)
    W = model.coef
    return float(
        0.5 / n * np.sum(R * R)
        + alpha * l1_ratio * np.sum(np.linalg.norm(W, axis=0))
        + 0.5 * alpha * (1 - l1_ratio) * np.sum(W * W)
    )


def mten_alpha_max(pairs: RegressionPairs, l1_ratio: float) -> float:
    """Smallest ``alpha`` at which every feature column is zeroed."""
    Xc, Yc, _, _ = _center(pairs)
    return float(np.max(np.linalg.norm(Xc.T @ Yc, axis=1)) / (pairs.count * l1_ratio))


def mten_fit(pairs: RegressionPairs, alpha: float, l1_ratio: float = 0.5, tol: float = 1e-10, max_iter: int = 10000) -> LinearModel:
    """Multi-task elastic net by cyclic block coordinate descent.

    Minimizes ``1/(2n) ||Y - X W^T - b||_F^2 + alpha * l1_ratio * sum_d ||W[:, d]||_2
    + alpha * (1 - l1_ratio) / 2 * ||W||_F^2``. Each block is the column of
    coefficients shared by one feature across all outputs and has a
    closed-form group soft-threshold update. Stops when the largest block
    change falls below ``tol``.
    """
    if alpha < 0 or not 0 <= l1_ratio <= 1:
        raise ValueError("need alpha >= 0 and 0 <= l1_ratio <= 1")
    Xc, Yc, x_mean, y_mean = _center(pairs)
    n, D = Xc.shape
    M = Yc.shape[1]
    # work on Gram quantities: cost per sweep is O(D^2 M), independent of n
    gram = Xc.T @ Xc / n
    xty = Xc.T @ Yc / n
    l1 = alpha * l1_ratio
    l2 = alpha * (1 - l1_ratio)
    W = np.zeros((D, M))  # row d is feature d's block
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        delta = 0.0
        for d in range(D):
            if gram[d, d] == 0:
                continue
            old = W[d].copy()
            z = xty[d] - gram[d] @ W + gram[d, d] * old
            norm = np.linalg.norm(z)
            new = np.zeros(M) if norm <= l1 else (1 - l1 / norm) * z / (gram[d, d] + l2)
            W[d] = new
            delta = max(delta, float(np.max(np.abs(new - old))))
        if delta < tol:
            converged = True
            break
    if not converged:
        logger.warning("multi-task elastic net did not converge in %d sweeps", max_iter)
    coef = W.T
    return LinearModel(coef, y_mean - coef @ x_mean, converged=converged, n_iter=it)


def regress_predict_label(model: LinearModel, x) -> np.ndarray:
    """Class with the largest regressed value for each row of ``x``."""
    return np.argmax(model.predict(x), axis=1)
