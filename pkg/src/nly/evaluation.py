"""Accuracy, group-level cross-validation, the three-method synthetic
experiment and the numerical verification suite."""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import clone
from sklearn.model_selection import KFold

from . import inference, model
from .datagen import GenConfig, generate, sample_test_instances
from .estimators import (
    MultiTaskElasticNetDistributionRegressor,
    NoisyLabelDistributionClassifier,
    RidgeDistributionRegressor,
)
from .inference import FitConfig, FitState
from .model import Dataset, Hyperparams

logger = logging.getLogger(__name__)

METHODS = ("proposed", "mten", "ridge")
ALPHA_C1_SETTINGS = (1.0, 10.0, 100.0)
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


def n_jobs_from_env(default=1) -> int:
    value = os.environ.get("NLY_THREADS")
    return max(1, int(value)) if value else default


def accuracy(predicted, truth) -> float:
    predicted, truth = np.asarray(predicted), np.asarray(truth)
    if predicted.shape != truth.shape:
        raise ValueError(f"length mismatch: {predicted.shape} vs {truth.shape}")
    return float(np.mean(predicted == truth)) if truth.size else 0.0


# ----------------------------------------------------------- cross-validation


@dataclass
class CvSpec:
    """Grid of ``set_params`` dictionaries, scored by held-out group MSE.

    ``complexity`` orders grid points for tie-breaking (lower is simpler,
    i.e. more regularized); by default earlier grid points are simpler.
    """

    grid: list
    folds: int = 3
    seed: int = 0
    complexity: Optional[Callable[[dict], float]] = None


def group_folds(n_groups: int, folds: int, seed: int = 0):
    if n_groups < folds:
        raise ValueError(f"cannot split {n_groups} groups into {folds} folds")
    if folds < 2:
        raise ValueError("need at least two folds")
    return list(KFold(folds, shuffle=True, random_state=seed).split(np.arange(n_groups)))


def held_out_mse(estimator, dataset: Dataset, train, test) -> float:
    X, S = dataset.features, dataset.noisy_dists
    est = estimator.fit(X, [dataset.groups[i] for i in train], S[train])
    pred = est.predict_group_dists(X, [dataset.groups[i] for i in test])
    return float(np.mean((S[test] - pred) ** 2))


def cross_validate(dataset: Dataset, estimator, spec: CvSpec, n_jobs: int = 1):
    """Return ``(best_params, mean_scores)``.

    Instances stay visible in every fold; only group observations are split.
    """
    dataset = dataset.without_truth()
    if len(spec.grid) == 1:
        return dict(spec.grid[0]), [float("nan")]
    splits = group_folds(dataset.n_groups, spec.folds, spec.seed)
    jobs = [(k, train, test) for k in range(len(spec.grid)) for train, test in splits]
    scores = Parallel(n_jobs=n_jobs)(
        delayed(held_out_mse)(clone(estimator).set_params(**spec.grid[k]), dataset, train, test)
        for k, train, test in jobs
    )
    means = np.asarray(scores).reshape(len(spec.grid), len(splits)).mean(axis=1)
    complexity = spec.complexity or (lambda p: spec.grid.index(p))
    best = min(range(len(spec.grid)), key=lambda k: (means[k], complexity(spec.grid[k])))
    return dict(spec.grid[best]), means.tolist()


def default_grids():
    log_grid = [float(v) for v in np.logspace(-3, 3, 7)]
    return {
        # larger diagonal concentration is the stronger prior, so it counts as simpler
        "proposed": CvSpec([{"alpha_c1": c} for c in (100.0, 10.0, 1.0)], complexity=lambda p: -p["alpha_c1"]),
        "ridge": CvSpec([{"lam": v} for v in log_grid], complexity=lambda p: -p["lam"]),
        "mten": CvSpec(
            [{"alpha": a, "l1_ratio": r} for a in log_grid for r in (0.1, 0.5, 0.9)],
            complexity=lambda p: (-p["alpha"], -p["l1_ratio"]),
        ),
    }


def default_estimators():
    return {
        "proposed": NoisyLabelDistributionClassifier(max_sweeps=200, tol=1e-5),
        "ridge": RidgeDistributionRegressor(),
        "mten": MultiTaskElasticNetDistributionRegressor(),
    }


# ------------------------------------------------------------- experiment


@dataclass
class RunRecord:
    method: str
    alpha_c1: float
    seed: int
    accuracy: float
    inductive_accuracy: float
    selected: dict
    elbo_trace: list = field(default_factory=list)
    seconds: float = 0.0
    # worst simplex violation seen during the final fit, when it ran in audit mode
    max_simplex_violation: Optional[float] = None


@dataclass
class ExperimentReport:
    methods: tuple
    settings: tuple
    seeds: tuple
    runs: list

    def _cell(self, method, setting, attr="accuracy"):
        return np.array([getattr(r, attr) for r in self.runs if r.method == method and r.alpha_c1 == setting])

    def mean(self, method, setting, attr="accuracy") -> float:
        return float(self._cell(method, setting, attr).mean())

    def std(self, method, setting, attr="accuracy") -> float:
        return float(self._cell(method, setting, attr).std())

    def table(self, attr="accuracy") -> str:
        head = "method    " + "".join(f"  alpha_c1={s:<10g}" for s in self.settings)
        lines = [head]
        for m in self.methods:
            cells = "".join(f"  {self.mean(m, s, attr):.3f} +/- {self.std(m, s, attr):.3f}" for s in self.settings)
            lines.append(f"{m:<10}{cells}")
        return "\n".join(lines)


def run_one(method, estimator, cv: CvSpec, gen: GenConfig, n_test=1000, n_jobs=1) -> RunRecord:
    start = time.perf_counter()
    dataset, truth = generate(gen)
    observed = dataset.without_truth()
    selected, _ = cross_validate(observed, estimator, cv, n_jobs=n_jobs)
    est = clone(estimator).set_params(**selected)
    est.fit(observed.features, observed.groups, observed.noisy_dists)
    X_test, y_test = sample_test_instances(truth, n_test, gen.seed)
    result = getattr(est, "result_", None)
    audit = result.audit if result is not None else None
    return RunRecord(
        method=method,
        alpha_c1=gen.hyper.alpha_c1,
        seed=gen.seed,
        accuracy=accuracy(est.labels_, truth.true_labels),
        inductive_accuracy=accuracy(est.predict(X_test), y_test),
        selected=selected,
        elbo_trace=list(getattr(est, "elbo_trace_", [])),
        seconds=time.perf_counter() - start,
        max_simplex_violation=audit.get("max_simplex_violation") if audit else None,
    )


def run_experiment(
    seeds: Sequence[int] = DEFAULT_SEEDS,
    gen: GenConfig = GenConfig(),
    grids: Optional[dict] = None,
    methods: Sequence[str] = METHODS,
    settings: Sequence[float] = ALPHA_C1_SETTINGS,
    estimators: Optional[dict] = None,
    n_jobs: Optional[int] = None,
) -> ExperimentReport:
    """Accuracy of true label estimation for each method, diagonal
    concentration setting and seed. Accuracy is transductive: labels are
    estimated for the same instances whose groups were observed."""
    if not seeds:
        raise ValueError("need at least one seed")
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ValueError(f"unknown methods: {sorted(unknown)}")
    grids = {**default_grids(), **(grids or {})}
    estimators = {**default_estimators(), **(estimators or {})}
    n_jobs = n_jobs or n_jobs_from_env()
    jobs = [
        (m, replace(gen, seed=int(seed), hyper=replace(gen.hyper, alpha_c1=float(c1))))
        for c1 in settings
        for seed in seeds
        for m in methods
    ]

    def job(m, g):
        try:
            return run_one(m, estimators[m], grids[m], g)
        except Exception as exc:
            raise RuntimeError(f"run failed: method={m} alpha_c1={g.hyper.alpha_c1} seed={g.seed}: {exc}") from exc

    runs = Parallel(n_jobs=n_jobs)(delayed(job)(m, g) for m, g in jobs)
    for r in runs:
        logger.info("%s alpha_c1=%g seed=%d accuracy=%.3f (%.1fs)", r.method, r.alpha_c1, r.seed, r.accuracy, r.seconds)
    return ExperimentReport(tuple(methods), tuple(float(s) for s in settings), tuple(int(s) for s in seeds), runs)


# ------------------------------------------------------- verification suite


def random_instance(rng, U, N, M, D, max_group=None, alpha_s_range=(1.0, 20.0)):
    """A random small dataset, hyperparameters and full parameter state."""
    X = rng.normal(size=(U, D))
    max_group = min(max_group or U, U)
    groups = [np.sort(rng.choice(U, size=rng.integers(1, max_group + 1), replace=False)) for _ in range(N)]
    S = rng.dirichlet(np.ones(M), size=N) + 0.1 * rng.normal(size=(N, M)) if N else np.zeros((0, M))
    hyper = Hyperparams(
        alpha_w=float(rng.uniform(0.5, 2.0)),
        alpha_s=float(rng.uniform(*alpha_s_range)),
        alpha_c0=float(rng.uniform(1.0, 3.0)),
        alpha_c1=float(rng.uniform(1.0, 10.0)),
    )
    dataset = Dataset(X, groups, S)
    P = dataset.memberships.n_pairs
    state = FitState(
        rng.normal(size=(M, D)),
        rng.dirichlet(np.full(M, 2.0), size=M),
        rng.dirichlet(np.full(M, 2.0), size=U),
        rng.dirichlet(np.full(M, 2.0), size=P) if P else np.zeros((0, M)),
    )
    return dataset, hyper, state


def map_logistic_newton(X, y, n_classes, alpha_w, tol=1e-12, max_iter=100):
    """MAP multinomial logistic regression by damped Newton steps on the full Hessian."""
    U, D = X.shape
    Y = np.eye(n_classes)[y]
    w = np.zeros(n_classes * D)

    def objective(w):
        a = X @ w.reshape(n_classes, D).T
        return np.sum(Y * a) - np.sum(np.log(np.sum(np.exp(a - a.max(1, keepdims=True)), 1)) + a.max(1)) - 0.5 * alpha_w * w @ w

    for _ in range(max_iter):
        W = w.reshape(n_classes, D)
        P = model.softmax(X @ W.T)
        grad = ((Y - P).T @ X).ravel() - alpha_w * w
        if np.max(np.abs(grad)) < tol:
            break
        H = -alpha_w * np.eye(n_classes * D)
        for u in range(U):
            cov = np.diag(P[u]) - np.outer(P[u], P[u])
            H -= np.kron(cov, np.outer(X[u], X[u]))
        step = np.linalg.solve(H, -grad)
        f0, t = objective(w), 1.0
        while objective(w + t * step) < f0 and t > 1e-10:
            t *= 0.5
        w = w + t * step
    return w.reshape(n_classes, D)


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    threshold: float

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: measured {self.measured:.3e} (threshold {self.threshold:.0e})"


def check_gradients(seed=0, n_instances=20, flip_eta_sign=False) -> list:
    rng = np.random.default_rng(seed)
    w_err = e_err = 0.0
    for _ in range(n_instances):
        U, N, M, D = rng.integers(1, 6), rng.integers(1, 4), rng.integers(2, 4), rng.integers(1, 5)
        dataset, hyper, state = random_instance(rng, U, N, M, D)
        errs = inference.gradient_check(state, dataset, hyper, flip_eta_sign=flip_eta_sign)
        w_err, e_err = max(w_err, errs["weights"]), max(e_err, errs["eta"])
    return [
        Check("weight gradient vs central differences", w_err < 1e-5, w_err, 1e-5),
        Check("eta gradient vs central differences", e_err < 1e-5, e_err, 1e-5),
    ]


def _enumerable_instance(rng):
    M = int(rng.integers(2, 4))
    U = int(rng.integers(1, 4))
    while True:
        sizes = []
        budget = 4
        for _ in range(int(rng.integers(0, 4))):
            k = int(rng.integers(1, min(U, budget) + 1)) if budget else 0
            if k:
                sizes.append(k)
                budget -= k
        if M ** (U + sum(sizes)) <= model.MAX_ENUMERATION:
            break
    X = rng.normal(size=(U, 2))
    groups = [np.sort(rng.choice(U, size=k, replace=False)) for k in sizes]
    S = rng.dirichlet(np.ones(M), size=len(groups)) + 0.1 * rng.normal(size=(len(groups), M))
    dataset = Dataset(X, groups, S.reshape(len(groups), M))
    hyper = Hyperparams(float(rng.uniform(0.5, 2)), float(rng.uniform(1, 20)), float(rng.uniform(1, 3)), float(rng.uniform(1, 10)))
    P = dataset.memberships.n_pairs
    state = FitState(
        rng.normal(size=(M, 2)),
        rng.dirichlet(np.full(M, 2.0), size=M),
        rng.dirichlet(np.ones(M), size=U),
        rng.dirichlet(np.ones(M), size=P) if P else np.zeros((0, M)),
    )
    return dataset, hyper, state


def jensen_gap(state: FitState, dataset: Dataset, hyper: Hyperparams) -> float:
    """exact log marginal minus the data part of the bound (nonnegative when the bound holds)."""
    terms = state.elbo_terms(dataset, hyper)
    data_part = sum(v for k, v in terms.items() if not k.startswith("prior"))
    return model.exact_log_marginal(state.params(), dataset, hyper) - data_part


def check_jensen(seed=0, n_instances=10) -> list:
    rng = np.random.default_rng(seed + 1)
    worst_random = worst_fitted = np.inf
    for _ in range(n_instances):
        dataset, hyper, state = _enumerable_instance(rng)
        worst_random = min(worst_random, jensen_gap(state, dataset, hyper))
        res = inference.fit(dataset, hyper, FitConfig(max_sweeps=50, init="uniform", init_seed=seed))
        fitted = FitState(res.params.weights, res.params.confusion, res.varparams.zeta, res.varparams.eta)
        worst_fitted = min(worst_fitted, jensen_gap(fitted, dataset, hyper))
    return [
        Check("Jensen bound at random states (min slack)", worst_random >= -1e-9, worst_random, -1e-9),
        Check("Jensen bound at fitted states (min slack)", worst_fitted >= -1e-9, worst_fitted, -1e-9),
    ]


def audit_monotonicity(seed=0, n_instances=20, max_sweeps=30) -> dict:
    """Fit random small instances in audit mode and collect the worst decreases."""
    rng = np.random.default_rng(seed + 2)
    worst = {"sweep_rel": 0.0, "closed_form_abs": 0.0, "iterative_rel": 0.0, "simplex": 0.0}
    for _ in range(n_instances):
        U, N, M, D = rng.integers(2, 11), rng.integers(1, 11), rng.integers(2, 5), rng.integers(1, 5)
        dataset, hyper, _ = random_instance(rng, U, N, M, D)
        init = "uniform" if rng.random() < 0.5 else "unmixing"
        res = inference.fit(dataset, hyper, FitConfig(max_sweeps=max_sweeps, audit=True, init=init, init_seed=int(rng.integers(1000))))
        tr = res.elbo_trace
        for a, b in zip(tr, tr[1:]):
            worst["sweep_rel"] = max(worst["sweep_rel"], (a - b) / abs(a))
        steps = res.audit["steps"]
        for (_, _, before), (_, name, after) in zip(steps, steps[1:]):
            if name in ("zeta", "confusion"):
                worst["closed_form_abs"] = max(worst["closed_form_abs"], before - after)
            else:
                worst["iterative_rel"] = max(worst["iterative_rel"], (before - after) / abs(before))
        worst["simplex"] = max(worst["simplex"], res.audit["max_simplex_violation"])
    return worst


def check_monotonicity(seed=0, n_instances=20) -> list:
    w = audit_monotonicity(seed, n_instances)
    return [
        Check("per-sweep bound decrease (relative)", w["sweep_rel"] <= 1e-6, w["sweep_rel"], 1e-6),
        Check("bound decrease after zeta/confusion updates (absolute)", w["closed_form_abs"] <= 1e-9, w["closed_form_abs"], 1e-9),
        Check("bound decrease after eta/weight updates (relative)", w["iterative_rel"] <= 1e-6, w["iterative_rel"], 1e-6),
        Check("simplex violation of zeta, eta, confusion", w["simplex"] <= 1e-12, w["simplex"], 1e-12),
    ]


def supervised_reduction_error(seed=0, n_instances=5) -> float:
    rng = np.random.default_rng(seed + 3)
    worst = 0.0
    for _ in range(n_instances):
        U, M, D = int(rng.integers(10, 30)), int(rng.integers(2, 5)), int(rng.integers(1, 5))
        X = rng.normal(size=(U, D))
        y = rng.integers(M, size=U)
        alpha_w = float(rng.uniform(0.5, 2.0))
        dataset = Dataset(X, [], np.zeros((0, M)))
        state = FitState(np.zeros((M, D)), np.full((M, M), 1.0 / M), np.eye(M)[y], np.zeros((0, M)))
        W, _ = inference.update_weights(state, dataset, Hyperparams(alpha_w=alpha_w), steps=2000, grad_tol=1e-10)
        W_ref = map_logistic_newton(X, y, M, alpha_w)
        worst = max(worst, float(np.max(np.abs(W - W_ref))))
    return worst


def verification_suite(seed=0, flip_eta_sign=False) -> list:
    """Run every numerical check; failures are reported, not raised."""
    checks = check_gradients(seed, flip_eta_sign=flip_eta_sign)
    checks += check_jensen(seed)
    checks += check_monotonicity(seed)
    err = supervised_reduction_error(seed)
    checks.append(Check("supervised reduction vs Newton MAP solver (max abs weight diff)", err < 1e-4, err, 1e-4))
    return checks
