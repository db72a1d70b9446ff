"""Command-line interface: ``nly generate|fit|baseline|verify|reproduce``.

Exit codes: 0 success, 1 verification failures, 2 configuration error,
3 I/O or file format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import evaluation, io
from .baselines import RankDeficientError
from .datagen import GenConfig, generate
from .estimators import (
    MultiTaskElasticNetDistributionRegressor,
    NoisyLabelDistributionClassifier,
    RidgeDistributionRegressor,
)
from .inference import NumericalFailure, gradient_check, FitState
from .model import Hyperparams

logger = logging.getLogger("nly")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


HYPER_DEFAULTS = {"alpha_w": 1.0, "alpha_s": 100.0, "alpha_c0": 1.0, "alpha_c1": 10.0}

DEFAULTS = {
    "generate": {"u": 100, "n": 1000, "group_size": 30, "m": 4, "d": 10, "seed": 0, "clamp_simplex": False,
        "identity_confusion": False, "singleton_groups": False, **HYPER_DEFAULTS},
    "fit": {
        **HYPER_DEFAULTS,
        "max_sweeps": 500,
        "tol": 1e-7,
        "eta_max_iters": 1,
        "init": "unmixing",
        "seed": 0,
        "cv": False,
        "folds": 3,
        "check_gradients": False,
        "audit": False,
    },
    "baseline": {"method": "ridge", "lam": 1.0, "alpha": 0.01, "l1_ratio": 0.5, "cv": False, "folds": 3, "seed": 0},
    "verify": {"seed": 0},
    "reproduce": {
        "seeds": "1,2,3,4,5",
        "methods": "proposed,mten,ridge",
        "settings": "1,10,100",
        "u": 100,
        "n": 1000,
        "group_size": 30,
        "m": 4,
        "d": 10,
        "alpha_w": 1.0,
        "alpha_s": 100.0,
        "alpha_c0": 1.0,
        "max_sweeps": 200,
        "tol": 1e-5,
        "folds": 3,
        "jobs": None,
    },
}
COMMON = {"out": None, "format": "text", "config": None}


def _float_list(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _int_list(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nly", description="Learn a classifier from noisy label distributions.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--out", help=out_help)
        p.add_argument("--format", choices=["text", "structured"], default=None)
        p.add_argument("--config", help="JSON file of option values (flags take precedence)")
        p.add_argument("--seed", type=int, default=None)

    def hyper(p, c1=True):
        p.add_argument("--alpha-w", type=float, default=None)
        p.add_argument("--alpha-s", type=float, default=None)
        p.add_argument("--alpha-c0", type=float, default=None)
        if c1:
            p.add_argument("--alpha-c1", type=float, default=None)

    p = sub.add_parser("generate", help="draw a synthetic dataset")
    common(p, "output directory for dataset.nly and truth.nly")
    for flag in ("--u", "--n", "--group-size", "--m", "--d"):
        p.add_argument(flag, type=int, default=None)
    hyper(p)
    p.add_argument("--clamp-simplex", action="store_true", default=None)
    p.add_argument("--identity-confusion", action="store_true", default=None, help="noise-free labels: confusion fixed to identity")
    p.add_argument("--singleton-groups", action="store_true", default=None, help="one single-member group per instance")

    p = sub.add_parser("fit", help="fit the noisy label distribution model")
    common(p, "output directory for model.nly and fit.nly")
    p.add_argument("--data", required=True, help="dataset.nly file")
    hyper(p)
    p.add_argument("--max-sweeps", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--eta-max-iters", type=int, default=None)
    p.add_argument("--init", choices=["unmixing", "uniform"], default=None)
    p.add_argument("--cv", action="store_true", default=None, help="select alpha_c1 by group cross-validation first")
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--check-gradients", action="store_true", default=None)
    p.add_argument("--audit", action="store_true", default=None)

    p = sub.add_parser("baseline", help="fit a regression baseline")
    common(p, "output directory for baseline.nly")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["ridge", "mten"], default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--l1-ratio", type=float, default=None)
    p.add_argument("--cv", action="store_true", default=None)
    p.add_argument("--folds", type=int, default=None)

    p = sub.add_parser("verify", help="run the numerical verification suite")
    common(p, "optional output directory for verify.nly")

    p = sub.add_parser("reproduce", help="run the three-method synthetic accuracy experiment")
    common(p, "output directory for report.nly and table.txt")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--methods", default=None, help="comma-separated subset of proposed,mten,ridge")
    p.add_argument("--settings", default=None, help="comma-separated alpha_c1 values")
    for flag in ("--u", "--n", "--group-size", "--m", "--d"):
        p.add_argument(flag, type=int, default=None)
    hyper(p, c1=False)
    p.add_argument("--max-sweeps", type=int, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    return parser


def resolve(args) -> dict:
    """Merge defaults, the optional JSON config file and explicit flags."""
    cmd = args.command
    allowed = {**DEFAULTS[cmd], **COMMON}
    opts = dict(allowed)
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(allowed))
        if unknown:
            raise ConfigError(f"unknown config keys for '{cmd}': {', '.join(unknown)}")
        opts.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "verbose", "config"):
            continue
        if value is not None:
            opts[key] = value
    return opts


def _out_dir(opts, required=True):
    out = opts.get("out")
    if out is None:
        if required:
            raise ConfigError("--out is required")
        return None
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _hyper(opts, alpha_c1=None) -> Hyperparams:
    try:
        return Hyperparams(
            float(opts["alpha_w"]),
            float(opts["alpha_s"]),
            float(opts["alpha_c0"]),
            float(alpha_c1 if alpha_c1 is not None else opts["alpha_c1"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _emit(opts, kind, sections, text):
    if opts["format"] == "structured":
        sys.stdout.write(io.dumps(kind, sections))
    else:
        print(text)


def cmd_generate(opts):
    try:
        config = GenConfig(
            U=int(opts["u"]),
            N=int(opts["n"]),
            group_size=int(opts["group_size"]),
            M=int(opts["m"]),
            D=int(opts["d"]),
            hyper=_hyper(opts),
            seed=int(opts["seed"]),
            clamp_simplex=bool(opts["clamp_simplex"]),
            confusion=np.eye(int(opts["m"])) if opts["identity_confusion"] else None,
            singleton_groups=bool(opts["singleton_groups"]),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(opts)
    dataset, truth = generate(config)
    io.save_dataset(out / "dataset.nly", dataset)
    io.save_truth(out / "truth.nly", truth)
    N = dataset.n_groups
    summary = [("value", k, v) for k, v in (("U", config.U), ("N", N), ("M", config.M), ("D", config.D), ("seed", config.seed))]
    _emit(opts, "summary", summary, f"generated U={config.U} N={N} M={config.M} D={config.D} seed={config.seed} -> {out}")
    return EXIT_OK


def _load_dataset(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return io.load_dataset(path)


def cmd_fit(opts):
    out = _out_dir(opts)
    dataset = _load_dataset(opts["data"])
    truth = dataset.true_labels
    observed = dataset.without_truth()
    est = NoisyLabelDistributionClassifier(
        **{k: float(opts[k]) for k in HYPER_DEFAULTS},
        max_sweeps=int(opts["max_sweeps"]),
        tol=float(opts["tol"]),
        eta_max_iters=int(opts["eta_max_iters"]),
        init=opts["init"],
        init_seed=int(opts["seed"]),
        audit=bool(opts["audit"]),
    )
    _hyper(opts)
    selected = {}
    if opts["cv"]:
        spec = evaluation.default_grids()["proposed"]
        spec.folds, spec.seed = int(opts["folds"]), int(opts["seed"])
        selected, _ = evaluation.cross_validate(observed, est, spec, n_jobs=evaluation.n_jobs_from_env())
        est.set_params(**selected)
        logger.info("cross-validation selected %s", selected)

    def progress(sweep, value, change):
        logger.info("sweep %d elbo %.10g max change %.3g", sweep, value, change)

    est.fit(observed.features, observed.groups, observed.noisy_dists, callback=progress)
    result = est.result_
    hyper = est.hyperparams()
    io.save_model(out / "model.nly", result.params, hyper)
    sections = io.fit_sections(result, hyper)
    if selected:
        sections.append(("value", "cv_selected", json.dumps(selected, sort_keys=True, separators=(",", ":"))))
    if truth is not None:
        sections.append(("floats", "transductive_accuracy", [evaluation.accuracy(result.predicted_labels, truth)]))
    lines = [f"sweeps={result.sweeps} converged={str(result.converged).lower()} elbo={result.elbo_trace[-1]!r}"]
    if opts["check_gradients"]:
        state = FitState(result.params.weights, result.params.confusion, result.varparams.zeta, result.varparams.eta)
        errs = gradient_check(state, observed, hyper)
        for name, err in sorted(errs.items()):
            status = "pass" if err < 1e-5 else "fail"
            sections.append(("floats", f"gradient_check_{name}", [err]))
            sections.append(("value", f"gradient_check_{name}_status", status))
            lines.append(f"gradient check {name}: {status} (max relative error {err:.3e})")
    io.write(out / "fit.nly", "fit", sections)
    _emit(opts, "fit", sections, "\n".join(lines))
    return EXIT_OK


def cmd_baseline(opts):
    out = _out_dir(opts)
    dataset = _load_dataset(opts["data"])
    truth = dataset.true_labels
    observed = dataset.without_truth()
    method = opts["method"]
    if method == "ridge":
        est = RidgeDistributionRegressor(lam=float(opts["lam"]))
    elif method == "mten":
        est = MultiTaskElasticNetDistributionRegressor(alpha=float(opts["alpha"]), l1_ratio=float(opts["l1_ratio"]))
    else:
        raise ConfigError(f"unknown baseline method {method!r}")
    if opts["cv"]:
        spec = evaluation.default_grids()[method]
        spec.folds, spec.seed = int(opts["folds"]), int(opts["seed"])
        selected, _ = evaluation.cross_validate(observed, est, spec, n_jobs=evaluation.n_jobs_from_env())
        est.set_params(**selected)
    est.fit(observed.features, observed.groups, observed.noisy_dists)
    params = {k: v for k, v in est.get_params().items() if k in ("lam", "alpha", "l1_ratio")}
    io.save_linear_model(out / "baseline.nly", est.model_, method, params)
    sections = [("value", "method", method), ("ints", "predicted_labels", est.labels_)]
    if truth is not None:
        sections.append(("floats", "transductive_accuracy", [evaluation.accuracy(est.labels_, truth)]))
    io.write(out / "baseline_fit.nly", "baseline_fit", sections)
    _emit(opts, "baseline_fit", sections, f"{method} {params}")
    return EXIT_OK


def cmd_verify(opts):
    out = _out_dir(opts, required=False)
    checks = evaluation.verification_suite(int(opts["seed"]))
    sections = []
    for i, c in enumerate(checks):
        sections.append(("floats", f"check{i}", [c.measured, c.threshold]))
        sections.append(("value", f"check{i}_status", "pass" if c.passed else "fail"))
    if out is not None:
        io.write(out / "verify.nly", "verify", sections)
    _emit(opts, "verify", sections, "\n".join(c.line() for c in checks))
    return EXIT_OK if all(c.passed for c in checks) else EXIT_VERIFY


def cmd_reproduce(opts):
    out = _out_dir(opts)
    try:
        seeds = _int_list(opts["seeds"])
        methods = [m.strip() for m in str(opts["methods"]).split(",") if m.strip()]
        settings = _float_list(opts["settings"])
        gen = GenConfig(
            U=int(opts["u"]),
            N=int(opts["n"]),
            group_size=int(opts["group_size"]),
            M=int(opts["m"]),
            D=int(opts["d"]),
            hyper=_hyper(opts, alpha_c1=settings[0] if settings else 1.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if not seeds:
        raise ConfigError("need at least one seed")
    unknown = sorted(set(methods) - set(evaluation.METHODS))
    if unknown or not methods:
        raise ConfigError(f"unknown methods: {unknown}")
    grids = evaluation.default_grids()
    for spec in grids.values():
        spec.folds = int(opts["folds"])
    estimators = evaluation.default_estimators()
    estimators["proposed"].set_params(max_sweeps=int(opts["max_sweeps"]), tol=float(opts["tol"]))
    report = evaluation.run_experiment(
        seeds, gen, grids=grids, methods=methods, settings=settings, estimators=estimators, n_jobs=opts["jobs"]
    )
    sections = io.report_sections(report)
    io.write(out / "report.nly", "report", sections)
    table = "transductive accuracy (mean +/- std over seeds)\n" + report.table()
    table += "\n\ninductive accuracy on fresh instances\n" + report.table("inductive_accuracy")
    (out / "table.txt").write_text(table + "\n")
    for r in report.runs:
        logger.info("run %s alpha_c1=%g seed=%d took %.1fs", r.method, r.alpha_c1, r.seed, r.seconds)
    _emit(opts, "report", sections, table)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "fit": cmd_fit,
    "baseline": cmd_baseline,
    "verify": cmd_verify,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        opts = resolve(args)
        return COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"nly: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, io.FormatError) as exc:
        print(f"nly: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalFailure, RankDeficientError, FloatingPointError) as exc:
        print(f"nly: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
