"""Coordinate-ascent variational inference for the noisy label distribution model.

One sweep updates, in order, the group-dependent label responsibilities
(eta), the class responsibilities (zeta), the confusion matrix and the
weights. Each step maximizes the lower bound over its own block, so the
bound never decreases from sweep to sweep.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import model
from .model import (
    Dataset,
    FitResult,
    Hyperparams,
    ModelParams,
    VariationalParams,
    _safe_log,
    class_logits,
    softmax,
)

logger = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """The lower bound became non-finite during fitting."""


@dataclass(frozen=True)
class FitConfig:
    max_sweeps: int = 500
    elbo_rel_tol: float = 1e-7
    w_steps: int = 100
    w_grad_tol: float = 1e-6
    w_memory: int = 10
    eta_max_iters: int = 1
    eta_damping: float = 1.0
    eta_tol: float = 1e-6
    init_seed: int = 0
    init: str = "unmixing"
    check_gradients: bool = False
    audit: bool = False

    def __post_init__(self):
        if self.max_sweeps < 1 or self.w_steps < 1 or self.w_memory < 1 or self.eta_max_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if not (self.elbo_rel_tol > 0 and self.w_grad_tol > 0 and self.eta_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.init not in ("unmixing", "uniform"):
            raise ValueError("init must be 'unmixing' or 'uniform'")
        if not 0 < self.eta_damping <= 1:
            raise ValueError("eta_damping must lie in (0, 1]")


@dataclass
class FitState:
    """Mutable working copy of all parameters during a fit."""

    weights: np.ndarray
    confusion: np.ndarray
    zeta: np.ndarray
    eta: np.ndarray

    @classmethod
    def initial(cls, dataset: Dataset, seed: int = 0) -> "FitState":
        U, M, D = dataset.n_instances, dataset.n_classes, dataset.n_features
        rng = np.random.Generator(np.random.PCG64(int(seed)))
        # near-uniform, but jittered so the classes are not exchangeable at the start
        zeta = rng.dirichlet(np.full(M, 100.0), size=U)
        eta = zeta[dataset.memberships.pair_instance].copy()
        confusion = 0.5 * np.eye(M) + 0.5 / M
        confusion /= confusion.sum(axis=1, keepdims=True)
        return cls(np.zeros((M, D)), confusion, zeta, eta)

    @classmethod
    def unmixing(cls, dataset: Dataset, ridge: float = 1e-2, seed: int = 0) -> "FitState":
        """Start from a per-instance least-squares unmixing of the observations.

        Solves ``min ||A R - S||^2 + ridge ||R - 1/M||^2`` where ``A`` averages
        instances into groups, so row ``u`` of ``R`` estimates the expected
        group-dependent label distribution of instance ``u``. Its clipped,
        renormalized rows seed ``zeta``; with a diagonal-heavy confusion
        prior this reads the unmixed distribution as the class posterior.
        """
        state = cls.initial(dataset, seed)
        mem = dataset.memberships
        if mem.n_pairs == 0:
            return state
        U, M = dataset.n_instances, dataset.n_classes
        A = sparse.csr_matrix(
            (1.0 / mem.group_sizes[mem.pair_group], (mem.pair_group, mem.pair_instance)),
            shape=(dataset.n_groups, U),
        )
        gram = (A.T @ A).toarray() + ridge * np.eye(U)
        R = np.linalg.solve(gram, A.T @ dataset.noisy_dists + ridge / M)
        R = np.maximum(R, 0.0) + 1e-3
        zeta = 0.9 * R / R.sum(axis=1, keepdims=True) + 0.1 * state.zeta
        state.zeta = zeta / zeta.sum(axis=1, keepdims=True)
        state.eta = state.zeta[mem.pair_instance].copy()
        return state

    def params(self) -> ModelParams:
        return ModelParams(self.weights.copy(), self.confusion.copy())

    def varparams(self) -> VariationalParams:
        return VariationalParams(self.zeta.copy(), self.eta.copy())

    def elbo_terms(self, dataset, hyper) -> dict:
        return model._elbo_terms(self.weights, self.confusion, self.zeta, self.eta, dataset, hyper)

    def elbo(self, dataset, hyper) -> float:
        return float(sum(self.elbo_terms(dataset, hyper).values()))


# ---------------------------------------------------------------- gradients


def weight_objective(W, zeta, X, alpha_w):
    a = X @ W.T
    return float(np.sum(zeta * a) - logsumexp(a, axis=1).sum() - 0.5 * alpha_w * np.sum(W * W))


def weight_gradient(W, zeta, X, alpha_w):
    """Gradient of the bound with respect to the weight matrix (rows are classes)."""
    p = softmax(X @ W.T)
    return (zeta - p * zeta.sum(axis=1, keepdims=True)).T @ X - alpha_w * W


def eta_gradient(state: FitState, dataset: Dataset, alpha_s: float, flip_sign: bool = False):
    """Partial derivatives of the bound with respect to each free eta entry.

    Adding the per-pair multiplier and setting this to zero gives the
    stationarity condition used by :func:`update_eta`. ``flip_sign`` negates
    the distribution-matching term and exists only to check that the
    gradient check catches such a mistake.
    """
    mem = dataset.memberships
    size = mem.group_sizes[mem.pair_group][:, None].astype(float)
    mean_t = model.group_means(state.eta, mem, dataset.n_groups)
    resid = dataset.noisy_dists[mem.pair_group] - mean_t[mem.pair_group]
    match = (alpha_s / size) * resid
    if flip_sign:
        match = -match
    var = -(alpha_s / (2 * size**2)) * (1.0 - 2.0 * state.eta)
    channel = state.zeta[mem.pair_instance] @ _safe_log(state.confusion)
    return match + var + channel - _safe_log(state.eta) - 1.0


# ------------------------------------------------------------------ updates


def update_eta(state: FitState, dataset: Dataset, hyper, max_iters=1, damping=1.0, tol=1e-6) -> np.ndarray:
    """Gauss-Seidel pass over group members, updating ``state.eta`` in place.

    With the other members of its group held fixed, the bound is linear in
    one membership's eta plus its entropy, so each member update is a
    closed-form softmax. Members at the same position of different groups
    do not interact and are updated together. Returns the final max change.
    """
    mem = dataset.memberships
    if mem.n_pairs == 0:
        return 0.0
    alpha_s = hyper.alpha_s
    eta = state.eta
    channel = state.zeta[mem.pair_instance] @ _safe_log(state.confusion)
    sums = np.zeros((dataset.n_groups, eta.shape[1]))
    np.add.at(sums, mem.pair_group, eta)
    order = np.argsort(mem.pair_position, kind="stable")
    bounds = np.searchsorted(mem.pair_position[order], np.arange(mem.pair_position.max() + 2))
    slices = [order[bounds[k]:bounds[k + 1]] for k in range(len(bounds) - 1)]
    S = dataset.noisy_dists

    change = math.inf
    for _ in range(max_iters):
        change = 0.0
        for sel in slices:
            if sel.size == 0:
                continue
            g = mem.pair_group[sel]
            size = mem.group_sizes[g][:, None]
            old = eta[sel]
            rest = (sums[g] - old) / size
            new = softmax((alpha_s / size) * (S[g] - rest) + channel[sel])
            if damping < 1.0:
                new = (1.0 - damping) * old + damping * new
            sums[g] += new - old
            eta[sel] = new
            change = max(change, float(np.max(np.abs(new - old))))
        if change < tol:
            break
    return change


def update_zeta(state: FitState, dataset: Dataset, include_normalizer: bool = False) -> np.ndarray:
    """Closed-form class responsibilities, written into ``state.zeta``.

    The per-instance log-partition of the classifier is constant across
    classes and cancels on normalization; ``include_normalizer`` keeps it in
    the exponent anyway.
    """
    mem = dataset.memberships
    a = class_logits(state.weights, dataset.features)
    logit = a.copy()
    if include_normalizer:
        logit -= logsumexp(a, axis=1, keepdims=True)
    if mem.n_pairs:
        evidence = state.eta @ _safe_log(state.confusion).T
        np.add.at(logit, mem.pair_instance, evidence)
    state.zeta = softmax(logit)
    return state.zeta


def update_confusion(state: FitState, dataset: Dataset, hyper: Hyperparams) -> np.ndarray:
    """MAP confusion rows given the responsibilities, written into ``state.confusion``."""
    M = state.zeta.shape[1]
    mem = dataset.memberships
    counts = state.zeta[mem.pair_instance].T @ state.eta if mem.n_pairs else np.zeros((M, M))
    num = counts + hyper.beta(M) - 1.0
    total = num.sum(axis=1, keepdims=True)
    C = np.where(total > 0, num / np.where(total > 0, total, 1.0), 1.0 / M)
    state.confusion = C / C.sum(axis=1, keepdims=True)
    return state.confusion


def update_weights(state: FitState, dataset: Dataset, hyper: Hyperparams, steps=100, grad_tol=1e-6, memory=10):
    """Quasi-Newton ascent on the weight-dependent part of the bound.

    Returns ``(weights, ok)``; ``ok`` is False when the line search failed to
    improve the objective and plain gradient ascent with shrinking steps was
    used instead.
    """
    X, zeta, alpha_w = dataset.features, state.zeta, hyper.alpha_w
    shape = state.weights.shape
    W0 = state.weights
    f0 = weight_objective(W0, zeta, X, alpha_w)

    def neg(w):
        W = w.reshape(shape)
        return -weight_objective(W, zeta, X, alpha_w), -weight_gradient(W, zeta, X, alpha_w).ravel()

    res = minimize(
        neg,
        W0.ravel(),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": steps, "gtol": grad_tol, "ftol": 1e-15, "maxcor": memory},
    )
    W = res.x.reshape(shape)
    ok = True
    if not np.all(np.isfinite(W)) or -res.fun < f0:
        ok = False
        W = _gradient_ascent(W0, zeta, X, alpha_w, steps)
    state.weights = W
    return W, ok


def _gradient_ascent(W, zeta, X, alpha_w, steps):
    f = weight_objective(W, zeta, X, alpha_w)
    step = 1.0
    for _ in range(steps):
        g = weight_gradient(W, zeta, X, alpha_w)
        while step > 1e-12:
            cand = W + step * g
            fc = weight_objective(cand, zeta, X, alpha_w)
            if fc >= f:
                W, f = cand, fc
                break
            step *= 0.5
        else:
            break
    return W


def predict(params: ModelParams, x) -> np.ndarray:
    """Most probable class for each row of ``x`` (lowest index on ties)."""
    return np.argmax(class_logits(params.weights, np.atleast_2d(x)), axis=1)


# ---------------------------------------------------------------------- fit


def _simplex_violation(*arrays):
    worst = 0.0
    for A in arrays:
        if A.size:
            worst = max(worst, float(np.max(np.abs(A.sum(axis=1) - 1.0))), float(-min(A.min(), 0.0)))
    return worst


def fit(
    dataset: Dataset,
    hyper: Hyperparams,
    config: FitConfig = FitConfig(),
    callback: Optional[Callable[[int, float, float], None]] = None,
    init: Optional[FitState] = None,
) -> FitResult:
    """Fit the model by coordinate ascent on the variational lower bound.

    ``callback(sweep, elbo, max_param_change)`` is invoked after each sweep.
    """
    dataset = dataset.without_truth()
    if init is not None:
        state = init
    elif config.init == "unmixing":
        state = FitState.unmixing(dataset, seed=config.init_seed)
    else:
        state = FitState.initial(dataset, config.init_seed)
    trace, flags = [], []
    audit = {"steps": [], "max_simplex_violation": 0.0} if config.audit else None
    converged = False
    sweep = 0

    for sweep in range(1, config.max_sweeps + 1):
        before = (state.weights.copy(), state.confusion.copy(), state.zeta.copy())
        steps = [
            ("eta", lambda: update_eta(state, dataset, hyper, config.eta_max_iters, config.eta_damping, config.eta_tol)),
            ("zeta", lambda: update_zeta(state, dataset)),
            ("confusion", lambda: update_confusion(state, dataset, hyper)),
            ("weights", lambda: update_weights(state, dataset, hyper, config.w_steps, config.w_grad_tol, config.w_memory)),
        ]
        for name, step in steps:
            out = step()
            if name == "weights" and not out[1]:
                flags.append((sweep, "weights_line_search_fallback"))
            if audit is not None:
                audit["steps"].append((sweep, name, state.elbo(dataset, hyper)))
                audit["max_simplex_violation"] = max(
                    audit["max_simplex_violation"], _simplex_violation(state.zeta, state.eta, state.confusion)
                )

        terms = state.elbo_terms(dataset, hyper)
        value = float(sum(terms.values()))
        if not math.isfinite(value):
            bad = [k for k, v in terms.items() if not math.isfinite(v)]
            raise NumericalFailure(f"lower bound is {value} at sweep {sweep}; non-finite terms: {', '.join(bad)}")
        trace.append(value)
        change = max(float(np.max(np.abs(new - old))) for new, old in zip((state.weights, state.confusion, state.zeta), before))
        if callback is not None:
            callback(sweep, value, change)
        logger.debug("sweep %d elbo %.10g change %.3g", sweep, value, change)
        if len(trace) > 1 and abs(trace[-1] - trace[-2]) <= config.elbo_rel_tol * abs(trace[-2]):
            converged = True
            break

    if audit is not None and config.check_gradients:
        audit["gradient_check"] = gradient_check(state, dataset, hyper)
    elif config.check_gradients:
        audit = {"gradient_check": gradient_check(state, dataset, hyper)}

    return FitResult(
        params=state.params(),
        varparams=state.varparams(),
        elbo_trace=trace,
        predicted_labels=np.argmax(state.zeta, axis=1),
        converged=converged,
        sweeps=sweep,
        flags=flags,
        audit=audit,
    )


# --------------------------------------------------------- gradient checks


def relative_error(analytic, numeric) -> float:
    """Largest entrywise error, relative to the entry magnitude once it exceeds one."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def _central_difference(f, x, idx, h):
    out = np.empty(len(idx))
    for k, j in enumerate(idx):
        orig = x.flat[j]
        x.flat[j] = orig + h
        fp = f()
        x.flat[j] = orig - h
        fm = f()
        x.flat[j] = orig
        out[k] = (fp - fm) / (2 * h)
    return out


def gradient_check(
    state: FitState, dataset: Dataset, hyper, h=1e-5, max_entries=40, seed=0, flip_eta_sign=False, eta_floor=1e-2
) -> dict:
    """Compare the analytic weight and eta gradients with central differences
    of the full lower bound. Checks at most ``max_entries`` entries of each.

    Only eta entries of at least ``eta_floor`` are probed: near zero the
    entropy term's curvature (1/eta) makes a fixed step meaningless, and at
    converged states many entries sit there."""
    rng = np.random.default_rng(seed)
    work = FitState(state.weights.copy(), state.confusion.copy(), state.zeta.copy(), state.eta.copy())
    f = lambda: work.elbo(dataset, hyper)

    gw = weight_gradient(work.weights, work.zeta, dataset.features, hyper.alpha_w)
    idx = np.arange(gw.size)
    if idx.size > max_entries:
        idx = rng.choice(idx, max_entries, replace=False)
    w_err = relative_error(gw.flat[idx], _central_difference(f, work.weights, idx, h))

    ge = eta_gradient(work, dataset, hyper.alpha_s, flip_sign=flip_eta_sign)
    idx = np.flatnonzero(work.eta.reshape(-1) >= eta_floor)
    if idx.size > max_entries:
        idx = rng.choice(idx, max_entries, replace=False)
    e_err = relative_error(ge.flat[idx], _central_difference(f, work.eta, idx, h)) if idx.size else 0.0
    return {"weights": w_err, "eta": e_err}
