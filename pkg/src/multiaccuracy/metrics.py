"""Evaluation quantities: subgroup error, cross-entropy, bias and certificates.

All expectations are taken over the rows handed in, i.e. the data
distribution is the uniform distribution over the evaluated sample.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import EmptyGroup, InvalidInput


def _mask(mask, n: int) -> np.ndarray:
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if mask.shape[0] != n:
        raise InvalidInput("mask length does not match scores")
    return mask


def _aligned(scores, labels):
    f = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels, dtype=float).reshape(-1)
    if f.shape != y.shape:
        raise InvalidInput(f"scores ({f.shape[0]}) and labels ({y.shape[0]}) differ in length")
    return f, y


def round_scores(scores) -> np.ndarray:
    """Hard predictions: 1 when the score is strictly above 1/2."""
    return (np.asarray(scores, dtype=float) > 0.5).astype(float)


def classification_error(scores, labels, mask=None) -> float:
    f, y = _aligned(scores, labels)
    m = _mask(mask, f.shape[0])
    if not m.any():
        raise EmptyGroup("classification error over an empty group")
    return float(np.mean(round_scores(f[m]) != y[m]))


def cross_entropy(scores, labels, mask=None) -> float:
    f, y = _aligned(scores, labels)
    m = _mask(mask, f.shape[0])
    if not m.any():
        raise EmptyGroup("cross-entropy over an empty group")
    f, y = f[m], y[m]
    return float(np.mean(-(y * np.log(f) + (1.0 - y) * np.log(1.0 - f))))


def bias(scores, labels, test, features=None) -> float:
    """Empirical correlation E[c(x) (f(x) - y(x))] of a test with the residual.

    ``test`` is either a vector of test values or a hypothesis, in which case
    ``features`` must be given.
    """
    f, y = _aligned(scores, labels)
    if hasattr(test, "evaluate"):
        if features is None:
            raise InvalidInput("features are needed to evaluate a hypothesis test")
        c = test.evaluate(features)
    else:
        c = np.asarray(test, dtype=float).reshape(-1)
    if c.shape != f.shape:
        raise InvalidInput("test values not aligned with scores")
    return float(np.mean(c * (f - y)))


@dataclass
class Certificate:
    passed: bool
    alpha: float
    max_bias: float
    worst_test: str
    biases: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "alpha": self.alpha, "max_bias": self.max_bias,
                "worst_test": self.worst_test, "n_tests": len(self.biases)}


def certify_multiaccuracy(scores, labels, tests: Mapping[str, np.ndarray],
                          alpha: float) -> Certificate:
    """Exhaustive multiaccuracy check over a finite, named class of tests.

    Ties in the maximum go to the lexicographically smallest test name.
    """
    if not tests:
        raise InvalidInput("test class is empty")
    biases = {name: bias(scores, labels, values) for name, values in tests.items()}
    worst = min(biases, key=lambda k: (-biases[k], k))
    top = biases[worst]
    return Certificate(passed=top <= alpha, alpha=float(alpha), max_bias=top,
                       worst_test=worst, biases=biases)


# --------------------------------------------------------------------------
# Groups and test classes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupSpec:
    """Named conjunction of equalities over evaluation-only group columns."""

    name: str
    conditions: tuple  # ((column, value), ...)

    def mask(self, groups: Mapping[str, np.ndarray], n: int | None = None) -> np.ndarray:
        if not self.conditions:
            if n is None:
                n = len(next(iter(groups.values())))
            return np.ones(n, dtype=bool)
        out = None
        for column, value in self.conditions:
            if column not in groups:
                raise InvalidInput(f"unknown group column {column!r}")
            hit = np.asarray(groups[column]).astype(str) == str(value)
            out = hit if out is None else out & hit
        return out

    def mass(self, groups, n=None) -> float:
        return float(np.mean(self.mask(groups, n)))


def _short(values) -> str:
    values = [str(v) for v in values]
    return "".join(values) if all(len(v) == 1 for v in values) else "&".join(values)


def group_specs(groups: Mapping[str, np.ndarray], columns=None,
                intersections: bool = True) -> list[GroupSpec]:
    """Table rows: every value of every column, then every full intersection.

    With columns (sex, race) this yields F, M, B, W, BF, BM, WF, WM in the
    conventional report order, with the last column leading in intersections.
    """
    columns = list(columns if columns is not None else groups)
    levels = {c: sorted(set(np.asarray(groups[c]).astype(str))) for c in columns}
    specs = [GroupSpec(_short([v]), ((c, v),)) for c in columns for v in levels[c]]
    if intersections and len(columns) > 1:
        order = list(reversed(columns))
        for combo in itertools.product(*(levels[c] for c in order)):
            specs.append(GroupSpec(_short(combo), tuple(zip(order, combo))))
    return specs


def group_tests(groups: Mapping[str, np.ndarray], specs, n: int | None = None) -> dict:
    """chi_S and -chi_S for every declared group."""
    tests = {}
    for spec in specs:
        chi = spec.mask(groups, n).astype(float)
        tests[f"+chi[{spec.name}]"] = chi
        tests[f"-chi[{spec.name}]"] = -chi
    return tests


def conjunction_tests(columns: Mapping[str, np.ndarray], width: int = 2) -> dict:
    """chi and -chi of every conjunction of at most ``width`` equality literals.

    Literals range over the declared binary/categorical columns; at most one
    literal per column.
    """
    if not 1 <= width <= 4:
        raise InvalidInput("conjunction width must be between 1 and 4")
    names = sorted(columns)
    levels = {c: sorted(set(np.asarray(columns[c]).astype(str))) for c in names}
    cols = {c: np.asarray(columns[c]).astype(str) for c in names}
    tests = {}
    for k in range(1, width + 1):
        for subset in itertools.combinations(names, k):
            for combo in itertools.product(*(levels[c] for c in subset)):
                chi = np.ones(len(cols[subset[0]]), dtype=bool)
                for c, v in zip(subset, combo):
                    chi &= cols[c] == v
                desc = " & ".join(f"{c}={v}" for c, v in zip(subset, combo))
                tests[f"+chi[{desc}]"] = chi.astype(float)
                tests[f"-chi[{desc}]"] = -chi.astype(float)
    return tests


# --------------------------------------------------------------------------
# Bound checkers
# --------------------------------------------------------------------------


def check_subgroup_error_bound(scores, labels, group_mask, tests: Mapping[str, np.ndarray],
                      alpha: float) -> dict:
    """Classification error on S versus 2 (alpha + tau) / gamma.

    tau is the smallest mean absolute distance between a test and the signed
    label 1 - 2y restricted to S.
    """
    f, y = _aligned(scores, labels)
    m = _mask(group_mask, f.shape[0])
    gamma = float(np.mean(m))
    if gamma == 0:
        raise EmptyGroup("group has zero mass")
    signed = np.where(m, 1.0 - 2.0 * y, 0.0)
    taus = {name: float(np.mean(np.abs(np.asarray(c, dtype=float) - signed)))
            for name, c in tests.items()}
    best = min(taus, key=lambda k: (taus[k], k))
    tau = taus[best]
    cert = certify_multiaccuracy(f, y, tests, alpha)
    err = classification_error(f, y, m)
    bound = 2.0 * (alpha + tau) / gamma
    return {"gamma": gamma, "tau": tau, "closest_test": best, "error": err,
            "bound": bound, "certified": cert.passed, "max_bias": cert.max_bias,
            "holds": err <= bound + 1e-9}


def check_do_no_harm(base_scores, boosted_scores, labels, group_mask, beta: float) -> dict:
    f0, y = _aligned(base_scores, labels)
    f, _ = _aligned(boosted_scores, labels)
    m = _mask(group_mask, y.shape[0])
    if not m.any():
        raise EmptyGroup("group is empty")
    err0 = classification_error(f0, y, m)
    err = classification_error(f, y, m)
    bound = 3.0 * err0 + 4.0 * beta
    return {"gamma": float(np.mean(m)), "beta": float(beta), "error_base": err0,
            "error_boosted": err, "bound": bound, "holds": err <= bound}


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


def group_metrics(scores, labels, mask) -> dict:
    f, y = _aligned(scores, labels)
    m = _mask(mask, f.shape[0])
    if not m.any():
        return {"mass": 0.0, "error": None, "mean_bias": None, "cross_entropy": None}
    return {"mass": float(np.mean(m)),
            "error": classification_error(f, y, m),
            "mean_bias": float(np.mean(f[m] - y[m])),
            "cross_entropy": cross_entropy(f, y, m)}


def metrics_report(labels, groups: Mapping[str, np.ndarray], specs,
                   model_scores: Mapping[str, np.ndarray], alpha: float = 0.05,
                   requires_sensitive: Mapping[str, bool] | None = None) -> dict:
    """Per-group error table for several models plus a certificate per model.

    Rows are All followed by each group spec; each row holds the group mass
    and, for every model, error / mean bias / cross-entropy.
    """
    y = np.asarray(labels, dtype=float)
    n = y.shape[0]
    rows = [GroupSpec("All", ())] + list(specs)
    table = []
    for spec in rows:
        mask = spec.mask(groups, n)
        entry = {"group": spec.name, "mass": float(np.mean(mask)), "models": {}}
        for name, scores in model_scores.items():
            entry["models"][name] = group_metrics(scores, y, mask)
        table.append(entry)
    tests = group_tests(groups, specs, n)
    certificates = {}
    for name, scores in model_scores.items():
        if tests:
            certificates[name] = certify_multiaccuracy(scores, y, tests, alpha).to_dict()
    return {"n": n, "models": list(model_scores), "rows": table,
            "certificates": certificates,
            "requires_sensitive_features": dict(requires_sensitive or {})}


def format_table(report: dict) -> str:
    """Fixed-width table: mass % and error % with one decimal per model."""
    names = [r["group"] for r in report["rows"]]
    width = max(6, max(len(n) for n in names) + 1)
    label_w = max(5, max(len(m) for m in report["models"]) + 1)
    lines = [" " * label_w + "".join(f"{n:>{width}}" for n in names)]
    lines.append(f"{'D':<{label_w}}" + "".join(f"{100 * r['mass']:>{width}.1f}" for r in report["rows"]))
    for model in report["models"]:
        cells = []
        for r in report["rows"]:
            err = r["models"][model]["error"]
            cells.append(f"{'-':>{width}}" if err is None else f"{100 * err:>{width}.1f}")
        lines.append(f"{model:<{label_w}}" + "".join(cells))
    return "\n".join(lines)
