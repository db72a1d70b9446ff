"""Synthetic data drawn from the noisy label distribution generative process.

All randomness comes from a single ``numpy.random.Generator`` backed by
PCG64 and seeded with ``GenConfig.seed``. Draws happen in a fixed order, so a
seed pins down the whole dataset within this implementation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import Dataset, Hyperparams, check_simplex_rows, class_logits, make_beta, softmax


@dataclass(frozen=True, eq=False)
class GenConfig:
    U: int = 100
    N: int = 1000
    group_size: int = 30
    M: int = 4
    D: int = 10
    hyper: Hyperparams = field(default_factory=Hyperparams)
    seed: int = 0
    clamp_simplex: bool = False
    # optional overrides: a fixed row-stochastic confusion matrix instead of a
    # Dirichlet draw, and one singleton group per instance (N and group_size ignored)
    confusion: Optional[np.ndarray] = None
    singleton_groups: bool = False

    def __post_init__(self):
        if self.confusion is not None:
            C = np.asarray(self.confusion, dtype=float)
            if C.shape != (self.M, self.M):
                raise ValueError(f"confusion must be {self.M} x {self.M}")
            check_simplex_rows(C, "confusion")
        for name in ("U", "N", "group_size", "M", "D"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.M < 2:
            raise ValueError("M must be >= 2")
        if self.group_size > self.U:
            raise ValueError(f"group_size ({self.group_size}) cannot exceed U ({self.U})")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True, eq=False)
class SyntheticTruth:
    true_weights: np.ndarray
    true_confusion: np.ndarray
    true_labels: np.ndarray
    true_group_dists: np.ndarray
    group_dep_labels: np.ndarray  # aligned with Dataset.memberships


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def sample_dirichlet(concentration, rng: np.random.Generator) -> np.ndarray:
    alpha = np.asarray(concentration, dtype=float)
    if np.any(~(alpha > 0)):
        raise ValueError("Dirichlet concentrations must be positive")
    g = rng.standard_gamma(alpha)
    total = g.sum()
    if total == 0:
        # every gamma draw underflowed (tiny concentrations): fall back to the largest one
        g = np.zeros_like(alpha)
        g[np.argmax(alpha)] = 1.0
        total = 1.0
    return g / total


def sample_categorical(p, rng: np.random.Generator, size=None):
    """Inverse-CDF draw of class indices from the probability vector ``p``."""
    p = np.asarray(p, dtype=float)
    check_simplex_rows(p[None, :], "p", atol=1e-9)
    cdf = np.cumsum(p)
    u = rng.random(size)
    idx = np.searchsorted(cdf, u * cdf[-1], side="right")
    return np.minimum(idx, len(p) - 1)


def _sample_rows(P, rng):
    # one inverse-CDF draw per row of P
    cdf = np.cumsum(P, axis=1)
    u = rng.random(P.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=1), P.shape[1] - 1)


def sample_group(U: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` distinct indices from ``range(U)`` by a partial Fisher-Yates shuffle."""
    perm = np.arange(U)
    for k in range(size):
        j = k + int(rng.integers(U - k))
        perm[k], perm[j] = perm[j], perm[k]
    return np.sort(perm[:size])


def generate(config: GenConfig):
    """Draw a dataset and its latent ground truth."""
    rng = make_rng(config.seed)
    h = config.hyper
    M, D, U = config.M, config.D, config.U

    W = rng.normal(0.0, 1.0 / np.sqrt(h.alpha_w), size=(M, D))
    if config.confusion is None:
        beta = make_beta(h.alpha_c0, h.alpha_c1, M)
        C = np.stack([sample_dirichlet(beta[m], rng) for m in range(M)])
    else:
        C = np.array(config.confusion, dtype=float)
    X = rng.normal(size=(U, D))
    y = _sample_rows(softmax(class_logits(W, X)), rng)
    if config.singleton_groups:
        N, size = U, 1
        groups = tuple(np.array([u]) for u in range(U))
    else:
        N, size = config.N, config.group_size
        groups = tuple(sample_group(U, size, rng) for _ in range(N))

    members = np.concatenate(groups)
    t = _sample_rows(C[y[members]], rng)
    pair_group = np.repeat(np.arange(N), size)
    t_mean = np.zeros((N, M))
    np.add.at(t_mean, (pair_group, t), 1.0)
    t_mean /= size
    S = t_mean + rng.normal(0.0, 1.0 / np.sqrt(h.alpha_s), size=(N, M))
    if config.clamp_simplex:
        S = np.maximum(S, 0.0)
        total = S.sum(axis=1, keepdims=True)
        S = np.where(total > 0, S / np.where(total > 0, total, 1.0), 1.0 / M)

    z = np.zeros((N, M))
    np.add.at(z, (pair_group, y[members]), 1.0)
    z /= size

    dataset = Dataset(X, groups, S, y)
    truth = SyntheticTruth(W, C, y, z, t)
    return dataset, truth


def sample_test_instances(truth: SyntheticTruth, n: int, seed: int):
    """Fresh labelled instances from the same classifier, for inductive scoring."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 1])))
    X = rng.normal(size=(n, truth.true_weights.shape[1]))
    y = _sample_rows(softmax(class_logits(truth.true_weights, X)), rng)
    return X, y
