"""Domain types, factor densities and the variational lower bound.

Classes are indexed from 0. Group memberships are stored as flat arrays in
group-major order: pair ``p`` links group ``pair_group[p]`` to instance
``pair_instance[p]``, and the group-dependent label responsibilities ``eta``
are a ``(n_pairs, M)`` array aligned with those pairs.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

LOG_2PI = math.log(2.0 * math.pi)
# responsibilities and confusion entries are floored here before taking logs
LOG_FLOOR = 1e-300
SIMPLEX_ATOL = 1e-12


def _safe_log(a):
    return np.log(np.maximum(a, LOG_FLOOR))


@dataclass(frozen=True)
class Hyperparams:
    """Prior precisions and Dirichlet concentrations of the model.

    ``alpha_c0`` is the off-diagonal and ``alpha_c1`` the diagonal
    concentration of every confusion row prior.
    """

    alpha_w: float = 1.0
    alpha_s: float = 100.0
    alpha_c0: float = 1.0
    alpha_c1: float = 10.0

    def __post_init__(self):
        for name in ("alpha_w", "alpha_s", "alpha_c0", "alpha_c1"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be a positive finite number, got {value!r}")
        if self.alpha_c0 < 1 or self.alpha_c1 < 1:
            raise ValueError("alpha_c0 and alpha_c1 must be >= 1 so the confusion MAP update stays nonnegative")

    def beta(self, n_classes: int) -> np.ndarray:
        return make_beta(self.alpha_c0, self.alpha_c1, n_classes)


@dataclass(frozen=True)
class Memberships:
    pair_group: np.ndarray
    pair_instance: np.ndarray
    pair_position: np.ndarray
    group_sizes: np.ndarray

    @property
    def n_pairs(self) -> int:
        return len(self.pair_group)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Features, group memberships and observed noisy label distributions.

    ``noisy_dists`` rows are Gaussian draws around the group mean of the
    group-dependent labels, so they are not required to lie on the simplex.
    ``true_labels`` is only for scoring and is never read by inference.
    """

    features: np.ndarray
    groups: tuple
    noisy_dists: np.ndarray
    true_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim != 2:
            raise ValueError("features must be a 2-D array")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        U = X.shape[0]
        groups = tuple(np.asarray(g, dtype=np.int64).reshape(-1) for g in self.groups)
        for i, g in enumerate(groups):
            if g.size == 0:
                raise ValueError(f"group {i} is empty")
            if g.min() < 0 or g.max() >= U:
                raise ValueError(f"group {i} has member indices outside [0, {U})")
            if np.unique(g).size != g.size:
                raise ValueError(f"group {i} lists a member more than once")
        S = np.asarray(self.noisy_dists, dtype=float)
        if S.ndim == 1 and S.size == 0:
            S = S.reshape(0, 0)
        if S.ndim != 2 or S.shape[0] != len(groups):
            raise ValueError("noisy_dists must have exactly one row per group")
        if not np.all(np.isfinite(S)):
            raise ValueError("noisy_dists must be finite")
        y = self.true_labels
        if y is not None:
            y = np.asarray(y, dtype=np.int64).reshape(-1)
            if y.size != U:
                raise ValueError("true_labels must have one entry per instance")
            if len(groups) and (y.min(initial=0) < 0 or y.max(initial=0) >= S.shape[1]):
                raise ValueError("true_labels must lie in [0, M)")
        for a in (X, S) + groups + ((y,) if y is not None else ()):
            a.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "noisy_dists", S)
        object.__setattr__(self, "true_labels", y)

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_classes(self) -> int:
        return self.noisy_dists.shape[1]

    @cached_property
    def memberships(self) -> Memberships:
        sizes = np.array([g.size for g in self.groups], dtype=np.int64)
        if sizes.size == 0:
            empty = np.zeros(0, dtype=np.int64)
            return Memberships(empty, empty, empty, sizes)
        pair_group = np.repeat(np.arange(len(sizes)), sizes)
        pair_instance = np.concatenate(self.groups)
        pair_position = np.concatenate([np.arange(n) for n in sizes])
        return Memberships(pair_group, pair_instance, pair_position, sizes)

    def without_truth(self) -> "Dataset":
        return replace(self, true_labels=None)

    def subset_groups(self, indices: Sequence[int]) -> "Dataset":
        """Keep only the listed groups; every instance stays visible."""
        indices = np.asarray(indices, dtype=np.int64)
        S = self.noisy_dists[indices] if indices.size else np.zeros((0, self.n_classes))
        return Dataset(self.features, tuple(self.groups[i] for i in indices), S, self.true_labels)


def check_simplex_rows(P, name="array", atol=SIMPLEX_ATOL):
    P = np.asarray(P, dtype=float)
    if P.size == 0:
        return
    if np.any(P < 0) or np.any(np.abs(P.sum(axis=-1) - 1.0) > atol):
        raise ValueError(f"every row of {name} must be nonnegative and sum to 1")


@dataclass(frozen=True, eq=False)
class ModelParams:
    weights: np.ndarray
    confusion: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.weights, dtype=float)
        C = np.asarray(self.confusion, dtype=float)
        if W.ndim != 2 or C.ndim != 2 or C.shape != (W.shape[0], W.shape[0]):
            raise ValueError("weights must be M x D and confusion M x M")
        if not np.all(np.isfinite(W)):
            raise ValueError("weights must be finite")
        check_simplex_rows(C, "confusion")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "confusion", C)


@dataclass(frozen=True, eq=False)
class VariationalParams:
    """Class responsibilities ``zeta`` (U x M) and group-dependent label
    responsibilities ``eta`` (n_pairs x M, aligned with ``Dataset.memberships``)."""

    zeta: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        Z = np.asarray(self.zeta, dtype=float)
        E = np.asarray(self.eta, dtype=float)
        if Z.ndim != 2 or E.ndim != 2 or (E.shape[0] and E.shape[1] != Z.shape[1]):
            raise ValueError("zeta must be U x M and eta n_pairs x M")
        check_simplex_rows(Z, "zeta")
        check_simplex_rows(E, "eta")
        object.__setattr__(self, "zeta", Z)
        object.__setattr__(self, "eta", E)


@dataclass
class FitResult:
    params: ModelParams
    varparams: VariationalParams
    elbo_trace: list
    predicted_labels: np.ndarray
    converged: bool
    sweeps: int
    flags: list = field(default_factory=list)
    audit: Optional[dict] = None


def make_beta(alpha_c0: float, alpha_c1: float, n_classes: int) -> np.ndarray:
    """Dirichlet concentrations: ``alpha_c1`` on the diagonal, ``alpha_c0`` elsewhere."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if alpha_c0 < 1 or alpha_c1 < 1:
        raise ValueError("concentrations must be >= 1")
    B = np.full((n_classes, n_classes), float(alpha_c0))
    np.fill_diagonal(B, float(alpha_c1))
    return B


def class_logits(weights, x):
    weights = np.asarray(weights, dtype=float)
    x = np.asarray(x, dtype=float)
    if weights.shape[-1] != x.shape[-1]:
        raise ValueError(f"weights have {weights.shape[-1]} columns but x has {x.shape[-1]} features")
    return x @ weights.T


def softmax(a, axis=-1):
    a = np.asarray(a, dtype=float)
    z = np.exp(a - np.max(a, axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def group_means(eta, memberships: Memberships, n_groups: int):
    """Membership-averaged eta per group, i.e. the expected group-dependent label distribution."""
    M = eta.shape[1] if eta.ndim == 2 else 0
    sums = np.zeros((n_groups, M))
    np.add.at(sums, memberships.pair_group, eta)
    return sums / np.maximum(memberships.group_sizes, 1)[:, None]


def expected_group_dist(varparams: VariationalParams, dataset: Dataset, group: int):
    m = dataset.memberships
    sel = m.pair_group == group
    if not np.any(sel):
        raise KeyError(f"no eta entries for group {group}")
    return varparams.eta[sel].mean(axis=0)


def log_prior_weights(weights, alpha_w: float) -> float:
    if not alpha_w > 0:
        raise ValueError("alpha_w must be positive")
    W = np.asarray(weights, dtype=float)
    M, D = W.shape
    return M * 0.5 * D * (math.log(alpha_w) - LOG_2PI) - 0.5 * alpha_w * float(np.sum(W * W))


def log_prior_confusion(confusion, beta) -> float:
    """Sum of the Dirichlet log densities of the confusion rows.

    Returns ``-inf`` when an entry is zero while its concentration exceeds one.
    """
    C = np.asarray(confusion, dtype=float)
    B = np.asarray(beta, dtype=float)
    if np.any((C <= 0) & (B > 1)):
        return -math.inf
    norm = np.sum(gammaln(B.sum(axis=1)) - gammaln(B).sum(axis=1))
    powers = np.where(B != 1, (B - 1) * _safe_log(C), 0.0)
    return float(norm + powers.sum())


def _pair_counts(zeta, eta, memberships: Memberships):
    """Expected (true class, group-dependent class) co-occurrence counts over all pairs."""
    return zeta[memberships.pair_instance].T @ eta


def elbo_terms(params: ModelParams, varparams: VariationalParams, dataset: Dataset, hyper: Hyperparams) -> dict:
    """The lower bound split into its named terms.

    The observation term takes the exact expectation of the Gaussian
    log-likelihood under q(T): the squared distance to the expected group
    distribution plus the variance of the membership average.
    """
    return _elbo_terms(params.weights, params.confusion, varparams.zeta, varparams.eta, dataset, hyper)


def _elbo_terms(W, C, zeta, eta, dataset, hyper):
    # raw arrays, no simplex validation: finite differences perturb eta off the simplex
    mem = dataset.memberships
    N, M = dataset.n_groups, C.shape[0]
    a = class_logits(W, dataset.features)

    if N:
        mean_t = group_means(eta, mem, N)
        sq = np.sum((dataset.noisy_dists - mean_t) ** 2)
        var = np.sum(eta * (1.0 - eta) / mem.group_sizes[mem.pair_group, None] ** 2)
        obs = -0.5 * hyper.alpha_s * (sq + var) + N * 0.5 * M * (math.log(hyper.alpha_s) - LOG_2PI)
        counts = _pair_counts(zeta, eta, mem)
        confusion_term = float(np.sum(np.where(counts > 0, counts * _safe_log(C), 0.0)))
        ent_t = -float(np.sum(eta * _safe_log(eta)))
    else:
        obs = confusion_term = ent_t = 0.0

    lse = logsumexp(a, axis=1, keepdims=True)
    return {
        "observation": float(obs),
        "confusion_channel": confusion_term,
        "classifier": float(np.sum(zeta * (a - lse))),
        "entropy_y": -float(np.sum(zeta * _safe_log(zeta))),
        "entropy_t": ent_t,
        "prior_w": log_prior_weights(W, hyper.alpha_w),
        "prior_c": log_prior_confusion(C, hyper.beta(M)),
    }


def elbo(params: ModelParams, varparams: VariationalParams, dataset: Dataset, hyper: Hyperparams) -> float:
    return float(sum(elbo_terms(params, varparams, dataset, hyper).values()))


def log_gaussian_obs(s, t_mean, alpha_s):
    s = np.asarray(s, dtype=float)
    M = s.shape[-1]
    return 0.5 * M * (math.log(alpha_s) - LOG_2PI) - 0.5 * alpha_s * np.sum((s - t_mean) ** 2, axis=-1)


MAX_ENUMERATION = 10**6


def exact_log_marginal(params: ModelParams, dataset: Dataset, hyper: Hyperparams) -> float:
    """log sum over every joint assignment of true and group-dependent labels
    of p(S|T) p(T|Y,C) p(Y|W,X), by exhaustive enumeration."""
    mem = dataset.memberships
    U, M, P = dataset.n_instances, params.confusion.shape[0], mem.n_pairs
    if M ** (U + P) > MAX_ENUMERATION:
        raise ValueError(f"{M}^{U + P} joint assignments is too many to enumerate")
    log_py = np.log(softmax(class_logits(params.weights, dataset.features)))
    with np.errstate(divide="ignore"):
        log_c = np.log(params.confusion)
    sizes = mem.group_sizes
    terms = []
    for y in itertools.product(range(M), repeat=U):
        base = sum(log_py[u, y[u]] for u in range(U))
        for t in itertools.product(range(M), repeat=P):
            lp = base
            t_mean = np.zeros((dataset.n_groups, M))
            for p in range(P):
                lp += log_c[y[mem.pair_instance[p]], t[p]]
                t_mean[mem.pair_group[p], t[p]] += 1.0 / sizes[mem.pair_group[p]]
            if dataset.n_groups:
                lp += float(np.sum(log_gaussian_obs(dataset.noisy_dists, t_mean, hyper.alpha_s)))
            terms.append(lp)
    return float(logsumexp(terms))
