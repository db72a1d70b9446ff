"""Line-oriented ``nly/1`` text format.

A document starts with ``nly/1 <kind>`` and holds named sections::

    matrix <name> <rows> <cols>     followed by one line per row
    floats <name> <n>               followed by one line
    ints <name> <n>                 followed by one line
    groups <name> <n>               followed by one line of member indices per group
    value <name> <token>            a single string token
    end

Floats are written with Python's shortest round-trip ``repr`` so every value
reads back bit for bit. Readers reject any other version header.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import Dataset, Hyperparams, ModelParams

VERSION = "nly/1"


class FormatError(ValueError):
    pass


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def _ifmt(values) -> str:
    return " ".join(str(int(v)) for v in values)


def dumps(kind: str, sections: list) -> str:
    """``sections`` is a list of ``(type, name, value)`` tuples."""
    lines = [f"{VERSION} {kind}"]
    for typ, name, value in sections:
        if typ == "matrix":
            A = np.asarray(value, dtype=float)
            if A.ndim != 2:
                raise ValueError(f"{name} is not a matrix")
            lines.append(f"matrix {name} {A.shape[0]} {A.shape[1]}")
            lines.extend(_fmt(row) for row in A)
        elif typ == "floats":
            v = np.asarray(value, dtype=float).reshape(-1)
            lines += [f"floats {name} {v.size}", _fmt(v)]
        elif typ == "ints":
            v = np.asarray(value).reshape(-1)
            lines += [f"ints {name} {v.size}", _ifmt(v)]
        elif typ == "groups":
            lines.append(f"groups {name} {len(value)}")
            lines.extend(_ifmt(g) for g in value)
        elif typ == "value":
            token = str(value)
            if not token or any(c.isspace() for c in token):
                raise ValueError(f"value {name!r} must be a single non-empty token")
            lines.append(f"value {name} {token}")
        else:
            raise ValueError(f"unknown section type {typ!r}")
    lines.append("end")
    return "\n".join(lines) + "\n"


def loads(text: str):
    """Return ``(kind, sections)`` with sections as a name -> value dict."""
    lines = text.split("\n")
    header = lines[0].split()
    if len(header) != 2 or header[0] != VERSION:
        raise FormatError(f"unsupported header {lines[0]!r}; expected '{VERSION} <kind>'")
    kind, out, k = header[1], {}, 1

    def take():
        nonlocal k
        if k >= len(lines):
            raise FormatError("unexpected end of document")
        k += 1
        return lines[k - 1]

    try:
        while True:
            parts = take().split()
            if parts == ["end"]:
                break
            typ, name = parts[0], parts[1]
            if typ == "matrix":
                r, c = int(parts[2]), int(parts[3])
                rows = [take().split() for _ in range(r)]
                A = np.array([[float(t) for t in row] for row in rows], dtype=float).reshape(r, c)
                out[name] = A
            elif typ == "floats":
                n = int(parts[2])
                v = np.array([float(t) for t in take().split()], dtype=float)
                if v.size != n:
                    raise FormatError(f"{name}: expected {n} floats, got {v.size}")
                out[name] = v
            elif typ == "ints":
                n = int(parts[2])
                v = np.array([int(t) for t in take().split()], dtype=np.int64)
                if v.size != n:
                    raise FormatError(f"{name}: expected {n} ints, got {v.size}")
                out[name] = v
            elif typ == "groups":
                out[name] = [np.array([int(t) for t in take().split()], dtype=np.int64) for _ in range(int(parts[2]))]
            elif typ == "value":
                out[name] = parts[2]
            else:
                raise FormatError(f"unknown section type {typ!r}")
    except (IndexError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed document near line {k}: {exc}") from exc
    return kind, out


def write(path, kind, sections):
    Path(path).write_text(dumps(kind, sections))


def read(path, expect_kind=None):
    kind, sections = loads(Path(path).read_text())
    if expect_kind is not None and kind != expect_kind:
        raise FormatError(f"{path}: expected a {expect_kind} document, found {kind}")
    return sections


def _require(sections, *names):
    missing = [n for n in names if n not in sections]
    if missing:
        raise FormatError(f"missing sections: {', '.join(missing)}")


# ------------------------------------------------------------- typed helpers


def dataset_sections(ds: Dataset) -> list:
    secs = [("matrix", "features", ds.features), ("groups", "groups", ds.groups)]
    S = ds.noisy_dists
    secs.append(("matrix", "noisy_dists", S if S.size else np.zeros((0, S.shape[1]))))
    if S.shape[0] == 0:
        secs.append(("value", "n_classes", S.shape[1]))
    if ds.true_labels is not None:
        secs.append(("ints", "true_labels", ds.true_labels))
    return secs


def save_dataset(path, ds: Dataset):
    write(path, "dataset", dataset_sections(ds))


def load_dataset(path) -> Dataset:
    s = read(path, "dataset")
    _require(s, "features", "groups", "noisy_dists")
    S = s["noisy_dists"]
    if S.shape[0] == 0 and "n_classes" in s:
        S = np.zeros((0, int(s["n_classes"])))
    try:
        return Dataset(s["features"], s["groups"], S, s.get("true_labels"))
    except ValueError as exc:
        raise FormatError(f"{path}: invalid dataset: {exc}") from exc


def save_truth(path, truth):
    write(
        path,
        "truth",
        [
            ("matrix", "true_weights", truth.true_weights),
            ("matrix", "true_confusion", truth.true_confusion),
            ("ints", "true_labels", truth.true_labels),
            ("matrix", "true_group_dists", truth.true_group_dists),
            ("ints", "group_dep_labels", truth.group_dep_labels),
        ],
    )


def load_truth(path):
    from .datagen import SyntheticTruth

    s = read(path, "truth")
    _require(s, "true_weights", "true_confusion", "true_labels", "true_group_dists", "group_dep_labels")
    return SyntheticTruth(s["true_weights"], s["true_confusion"], s["true_labels"], s["true_group_dists"], s["group_dep_labels"])


def hyper_sections(h: Hyperparams) -> list:
    return [("floats", "hyperparams", [h.alpha_w, h.alpha_s, h.alpha_c0, h.alpha_c1])]


def save_model(path, params: ModelParams, hyper: Hyperparams = None):
    secs = [("matrix", "weights", params.weights), ("matrix", "confusion", params.confusion)]
    if hyper is not None:
        secs += hyper_sections(hyper)
    write(path, "model", secs)


def load_model(path) -> ModelParams:
    s = read(path, "model")
    _require(s, "weights", "confusion")
    return ModelParams(s["weights"], s["confusion"])


def save_linear_model(path, lm, method, params: dict):
    write(
        path,
        "linear_model",
        [
            ("value", "method", method),
            ("value", "params", json.dumps(params, sort_keys=True, separators=(",", ":"))),
            ("matrix", "coef", lm.coef),
            ("floats", "intercept", lm.intercept),
        ],
    )


def load_linear_model(path):
    from .baselines import LinearModel

    s = read(path, "linear_model")
    _require(s, "coef", "intercept")
    return LinearModel(s["coef"], s["intercept"])


def fit_sections(result, hyper: Hyperparams) -> list:
    secs = hyper_sections(hyper) + [
        ("floats", "elbo_trace", result.elbo_trace),
        ("ints", "predicted_labels", result.predicted_labels),
        ("matrix", "zeta", result.varparams.zeta),
        ("value", "converged", "true" if result.converged else "false"),
        ("value", "sweeps", result.sweeps),
    ]
    if result.flags:
        secs.append(("ints", "flagged_sweeps", [f[0] for f in result.flags]))
    return secs


def report_sections(report) -> list:
    secs = [
        ("value", "methods", ",".join(report.methods)),
        ("floats", "settings", report.settings),
        ("ints", "seeds", report.seeds),
    ]
    for attr, label in (("accuracy", "accuracy"), ("inductive_accuracy", "inductive_accuracy")):
        mean = [[report.mean(m, s, attr) for s in report.settings] for m in report.methods]
        std = [[report.std(m, s, attr) for s in report.settings] for m in report.methods]
        secs += [("matrix", f"{label}_mean", mean), ("matrix", f"{label}_std", std)]
    for r in report.runs:
        key = f"{r.method}:{r.alpha_c1:g}:{r.seed}"
        secs.append(("floats", f"run_accuracy:{key}", [r.accuracy, r.inductive_accuracy]))
        secs.append(("value", f"run_selected:{key}", json.dumps(r.selected, sort_keys=True, separators=(",", ":"))))
        if r.elbo_trace:
            secs.append(("floats", f"run_elbo:{key}", r.elbo_trace))
    return secs
