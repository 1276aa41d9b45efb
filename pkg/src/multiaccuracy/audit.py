"""Multiaccuracy auditors.

An auditor receives a sample of feature vectors together with a residual
target restricted to a subpopulation and returns a bounded real-valued
hypothesis that correlates with that target. Four learners are provided:
ridge regression, greedy variance-reduction regression trees, the smoothed
cross-entropy-gradient auditor, and an exhaustive search over a declared
collection of set indicators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InvalidInput

AUDITOR_KINDS = ("ridge", "tree", "gradient", "set-collection")
SET_OPS = ("eq", "le", "gt")


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise InvalidInput(f"features must be a vector or matrix, got ndim={X.ndim}")
    return X


# --------------------------------------------------------------------------
# Hypotheses
# --------------------------------------------------------------------------


class Hypothesis:
    """A real-valued test function on feature vectors, clipped to [-bound, bound]."""

    kind = "abstract"
    bound = 1.0

    def raw(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, X) -> np.ndarray:
        X = _as_matrix(X)
        self._check_arity(X)
        return np.clip(self.raw(X), -self.bound, self.bound)

    def __call__(self, X) -> np.ndarray:
        return self.evaluate(X)

    def _check_arity(self, X: np.ndarray) -> None:
        pass

    def scaled(self, factor: float) -> "Hypothesis":
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind

    def __eq__(self, other):
        return type(self) is type(other) and self.to_dict() == other.to_dict()

    def __repr__(self):
        return f"<{type(self).__name__} {self.describe()}>"


class ZeroHypothesis(Hypothesis):
    kind = "zero"

    def raw(self, X):
        return np.zeros(X.shape[0])

    def scaled(self, factor):
        return self

    def to_dict(self):
        return {"kind": "zero"}


class LinearHypothesis(Hypothesis):
    kind = "linear"

    def __init__(self, w, b: float, bound: float = 1.0):
        self.w = np.asarray(w, dtype=float).reshape(-1)
        self.b = float(b)
        self.bound = float(bound)

    def _check_arity(self, X):
        if X.shape[1] != self.w.shape[0]:
            raise InvalidInput(
                f"linear hypothesis expects {self.w.shape[0]} features, got {X.shape[1]}")

    def raw(self, X):
        return X @ self.w + self.b

    def scaled(self, factor):
        return LinearHypothesis(self.w * factor, self.b * factor, self.bound)

    def to_dict(self):
        return {"kind": "linear", "w": [float(v) for v in self.w], "b": self.b,
                "bound": self.bound}

    def describe(self):
        return f"linear(|w|={np.linalg.norm(self.w):.4g}, b={self.b:.4g})"


@dataclass
class TreeNode:
    value: float = 0.0
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def depth(self) -> int:
        if self.is_leaf:
            return 0
        return 1 + max(self.left.depth(), self.right.depth())

    def leaves(self) -> int:
        if self.is_leaf:
            return 1
        return self.left.leaves() + self.right.leaves()

    def max_feature(self) -> int:
        if self.is_leaf:
            return -1
        return max(self.feature, self.left.max_feature(), self.right.max_feature())

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"leaf": self.value}
        return {"feature": self.feature, "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict, path: str = "root") -> "TreeNode":
        if not isinstance(d, dict):
            raise FormatError("tree node must be an object", path)
        if "leaf" in d:
            return cls(value=float(d["leaf"]))
        try:
            return cls(feature=int(d["feature"]), threshold=float(d["threshold"]),
                       left=cls.from_dict(d["left"], path + ".left"),
                       right=cls.from_dict(d["right"], path + ".right"))
        except KeyError as exc:
            raise FormatError(f"tree node missing field {exc}", path) from None


class TreeHypothesis(Hypothesis):
    """Binary regression tree. Rows with x[feature] <= threshold go left."""

    kind = "tree"

    def __init__(self, root: TreeNode, bound: float = 1.0):
        self.root = root
        self.bound = float(bound)

    def _check_arity(self, X):
        if self.root.max_feature() >= X.shape[1]:
            raise InvalidInput(
                f"tree splits on feature {self.root.max_feature()}, data has {X.shape[1]}")

    def raw(self, X):
        out = np.empty(X.shape[0])
        stack = [(self.root, np.arange(X.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                out[idx] = node.value
                continue
            go_left = X[idx, node.feature] <= node.threshold
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
        return out

    def scaled(self, factor):
        def walk(node):
            if node.is_leaf:
                return TreeNode(value=node.value * factor)
            return TreeNode(feature=node.feature, threshold=node.threshold,
                            left=walk(node.left), right=walk(node.right))
        return TreeHypothesis(walk(self.root), self.bound)

    @property
    def depth(self) -> int:
        return self.root.depth()

    def to_dict(self):
        return {"kind": "tree", "root": self.root.to_dict(), "bound": self.bound}

    def describe(self):
        return f"tree(depth={self.depth}, leaves={self.root.leaves()})"


@dataclass(frozen=True)
class Condition:
    column: int
    op: str
    value: float

    def __post_init__(self):
        if self.op not in SET_OPS:
            raise InvalidInput(f"unknown set operator {self.op!r}")

    def holds(self, X: np.ndarray) -> np.ndarray:
        col = X[:, self.column]
        if self.op == "eq":
            return col == self.value
        if self.op == "le":
            return col <= self.value
        return col > self.value

    def describe(self) -> str:
        sym = {"eq": "==", "le": "<=", "gt": ">"}[self.op]
        return f"x[{self.column}]{sym}{self.value:g}"


class SetHypothesis(Hypothesis):
    """Characteristic function of a conjunction of column conditions, or its negation."""

    kind = "set"

    def __init__(self, conditions, negated: bool = False):
        if isinstance(conditions, Condition):
            conditions = [conditions]
        self.conditions = tuple(conditions)
        if not self.conditions:
            raise InvalidInput("set hypothesis needs at least one condition")
        self.negated = bool(negated)
        self.bound = 1.0

    @classmethod
    def single(cls, column: int, op: str, value: float, negated: bool = False):
        return cls([Condition(int(column), op, float(value))], negated)

    def _check_arity(self, X):
        top = max(c.column for c in self.conditions)
        if top >= X.shape[1]:
            raise InvalidInput(f"set condition uses column {top}, data has {X.shape[1]}")

    def indicator(self, X) -> np.ndarray:
        X = _as_matrix(X)
        self._check_arity(X)
        member = np.ones(X.shape[0], dtype=bool)
        for cond in self.conditions:
            member &= cond.holds(X)
        return member

    def raw(self, X):
        chi = self.indicator(X).astype(float)
        return -chi if self.negated else chi

    def negate(self) -> "SetHypothesis":
        return SetHypothesis(self.conditions, not self.negated)

    def scaled(self, factor):
        # set indicators are fixed-valued; scaling is only meaningful for +-1
        if factor == 1:
            return self
        if factor == -1:
            return self.negate()
        raise InvalidInput("set hypotheses can only be scaled by +-1")

    def to_dict(self):
        if len(self.conditions) == 1:
            c = self.conditions[0]
            return {"kind": "set", "column": c.column, "op": c.op, "value": c.value,
                    "negated": self.negated}
        return {"kind": "set",
                "all": [{"column": c.column, "op": c.op, "value": c.value}
                        for c in self.conditions],
                "negated": self.negated}

    def describe(self):
        body = " & ".join(c.describe() for c in self.conditions)
        return ("-" if self.negated else "+") + "chi[" + body + "]"


def hypothesis_from_dict(d: dict, path: str = "hypothesis") -> Hypothesis:
    if not isinstance(d, dict) or "kind" not in d:
        raise FormatError("hypothesis must be an object with a 'kind'", path)
    kind = d["kind"]
    try:
        if kind == "zero":
            return ZeroHypothesis()
        if kind == "linear":
            return LinearHypothesis(d["w"], d["b"], d.get("bound", 1.0))
        if kind == "tree":
            return TreeHypothesis(TreeNode.from_dict(d["root"], path + ".root"),
                                  d.get("bound", 1.0))
        if kind == "set":
            if "all" in d:
                conds = [Condition(int(c["column"]), c["op"], float(c["value"]))
                         for c in d["all"]]
            else:
                conds = [Condition(int(d["column"]), d["op"], float(d["value"]))]
            return SetHypothesis(conds, d.get("negated", False))
    except KeyError as exc:
        raise FormatError(f"hypothesis missing field {exc}", path) from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad hypothesis payload: {exc}", path) from None
    raise FormatError(f"unknown hypothesis kind {kind!r}", path)


def evaluate_hypothesis(h: Hypothesis, features) -> np.ndarray | float:
    """Evaluate ``h`` on a single feature vector (returns a float) or a matrix."""
    arr = np.asarray(features, dtype=float)
    out = h.evaluate(arr)
    return float(out[0]) if arr.ndim == 1 else out


# --------------------------------------------------------------------------
# Configuration and samples
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditorConfig:
    kind: str = "ridge"
    ridge_lambda: float = 1.0
    tree_max_depth: int = 5
    tree_min_samples_leaf: int = 1
    smoothing_threshold: float = 10.0
    L: float = 8.0
    B: float | None = None
    # termination accuracy for the gradient auditor; None means "use the boost alpha"
    alpha: float | None = None
    gradient_base: str = "ridge"
    sets: tuple = field(default_factory=tuple)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in AUDITOR_KINDS:
            raise InvalidInput(f"unknown auditor kind {self.kind!r}; expected one of {AUDITOR_KINDS}")
        if not self.ridge_lambda >= 0:
            raise InvalidInput("ridge_lambda must be >= 0")
        if self.tree_max_depth < 1:
            raise InvalidInput("tree_max_depth must be >= 1")
        if self.tree_min_samples_leaf < 1:
            raise InvalidInput("tree_min_samples_leaf must be >= 1")
        if not self.smoothing_threshold > 0:
            raise InvalidInput("smoothing_threshold must be > 0")
        if not self.L > 0:
            raise InvalidInput("L must be > 0")
        if self.B is not None and not self.B > 0:
            raise InvalidInput("B must be > 0")
        if self.alpha is not None and not self.alpha > 0:
            raise InvalidInput("alpha must be > 0")
        if self.gradient_base not in ("ridge", "tree"):
            raise InvalidInput("gradient_base must be 'ridge' or 'tree'")
        if self.kind == "set-collection" and not self.sets:
            raise InvalidInput("set-collection auditor needs a non-empty collection of sets")

    @property
    def bound(self) -> float:
        if self.B is not None:
            return float(self.B)
        if self.kind == "gradient":
            return 2.0 * self.smoothing_threshold
        return 1.0

    def to_dict(self) -> dict:
        return {"kind": self.kind, "ridge_lambda": self.ridge_lambda,
                "tree_max_depth": self.tree_max_depth,
                "tree_min_samples_leaf": self.tree_min_samples_leaf,
                "smoothing_threshold": self.smoothing_threshold, "L": self.L,
                "B": self.bound, "alpha": self.alpha, "gradient_base": self.gradient_base,
                "sets": [s.to_dict() for s in self.sets], "seed": self.seed}


@dataclass
class AuditSample:
    """Features, a residual target and the restriction mask for a subpopulation S.

    The effective target is ``target * mask``: rows outside S keep full weight
    with target zero.
    """

    features: np.ndarray
    target: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.features = _as_matrix(self.features)
        n = self.features.shape[0]
        self.target = np.asarray(self.target, dtype=float).reshape(-1)
        if self.mask is None:
            self.mask = np.ones(n, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool).reshape(-1)
        if self.target.shape[0] != n or self.mask.shape[0] != n:
            raise InvalidInput("features, target and mask must have the same length")
        if n == 0:
            raise InvalidInput("audit sample is empty")
        if not (np.isfinite(self.features).all() and np.isfinite(self.target).all()):
            raise InvalidInput("audit sample contains non-finite values")

    @property
    def restricted_target(self) -> np.ndarray:
        return np.where(self.mask, self.target, 0.0)


# --------------------------------------------------------------------------
# Ridge auditor
# --------------------------------------------------------------------------


def fit_ridge(sample: AuditSample, config: AuditorConfig | None = None) -> LinearHypothesis:
    """Ridge regression with an unpenalized intercept on the restricted target.

    Minimizes ``sum_i (w.x_i + b - m_i t_i)^2 + lambda |w|^2``. With lambda = 0
    and a rank-deficient design the minimum-norm least-squares solution is used.
    """
    config = config or AuditorConfig()
    X = sample.features
    t = sample.restricted_target
    x_mean = X.mean(axis=0)
    t_mean = t.mean()
    Xc = X - x_mean
    tc = t - t_mean
    lam = float(config.ridge_lambda)
    if lam > 0:
        A = Xc.T @ Xc + lam * np.eye(X.shape[1])
        w = np.linalg.solve(A, Xc.T @ tc)
    else:
        w = np.linalg.lstsq(Xc, tc, rcond=None)[0]
    b = t_mean - x_mean @ w
    return LinearHypothesis(w, b, config.bound)


# --------------------------------------------------------------------------
# Regression tree auditor
# --------------------------------------------------------------------------


def _best_split(X: np.ndarray, v: np.ndarray, min_leaf: int):
    """Best variance-reduction split of rows (X, v).

    Returns (gain, feature, threshold) or None. Ties go to the lowest feature
    index and then to the lowest threshold.
    """
    m, d = X.shape
    total = v.sum()
    base = total * total / m
    n_left = np.arange(1, m, dtype=float)
    n_right = m - n_left
    size_ok = (n_left >= min_leaf) & (n_right >= min_leaf)
    best = None
    for j in range(d):
        order = np.argsort(X[:, j], kind="stable")
        xs = X[order, j]
        cs = np.cumsum(v[order])[:-1]
        valid = size_ok & (xs[:-1] < xs[1:])
        if not valid.any():
            continue
        gain = cs * cs / n_left + (total - cs) ** 2 / n_right - base
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))
        if best is None or gain[k] > best[0]:
            thr = 0.5 * (xs[k] + xs[k + 1])
            if not xs[k] <= thr < xs[k + 1]:
                thr = xs[k]
            best = (float(gain[k]), j, float(thr))
    return best


def fit_tree(sample: AuditSample, config: AuditorConfig | None = None) -> TreeHypothesis:
    """Greedy CART-style regression tree on the restricted target."""
    config = config or AuditorConfig(kind="tree")
    X = sample.features
    t = sample.restricted_target
    min_leaf = config.tree_min_samples_leaf
    tol = 1e-12 * max(1.0, float(t @ t))

    def grow(idx: np.ndarray, depth: int) -> TreeNode:
        vals = t[idx]
        node = TreeNode(value=float(vals.mean()))
        if depth >= config.tree_max_depth or idx.shape[0] < 2 * min_leaf:
            return node
        split = _best_split(X[idx], vals, min_leaf)
        if split is None or split[0] <= tol:
            return node
        _, feature, threshold = split
        go_left = X[idx, feature] <= threshold
        node.feature, node.threshold = feature, threshold
        node.left = grow(idx[go_left], depth + 1)
        node.right = grow(idx[~go_left], depth + 1)
        return node

    root = grow(np.arange(X.shape[0]), 0)
    return TreeHypothesis(root, config.bound)


# --------------------------------------------------------------------------
# Smoothed cross-entropy gradient auditor
# --------------------------------------------------------------------------


def gradient_targets(scores, labels, smoothing_threshold: float = 10.0) -> np.ndarray:
    """Partial derivative of the cross-entropy in the prediction, 1/(1 - f - y).

    Where the magnitude exceeds the threshold tau the derivative is replaced by
    the C1 extension s*(2 tau - tau^2 |u|), u = 1 - f - y, bounded by 2 tau.
    """
    f = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    tau = float(smoothing_threshold)
    u = 1.0 - f - y
    au = np.abs(u)
    sign = np.where(u >= 0, 1.0, -1.0)
    smooth = au * tau < 1.0
    with np.errstate(divide="ignore"):
        exact = 1.0 / np.where(smooth, 1.0, u)
    return np.where(smooth, sign * (2.0 * tau - tau * tau * au), exact)


def _xent_terms(scores, labels) -> np.ndarray:
    f = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    return -(y * np.log(f) + (1.0 - y) * np.log(1.0 - f))


def gradient_audit_stats(h: Hypothesis, sample: AuditSample, scores, labels,
                         config: AuditorConfig) -> dict:
    """Empirical quantities used by the gradient auditor's acceptance test.

    Norms and inner products are means over the whole sample with every
    quantity zeroed outside the restriction mask.
    """
    m = sample.mask.astype(float)
    f = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    resid = (f - y) * m
    grad = gradient_targets(f, y, config.smoothing_threshold) * m
    hv = h.evaluate(sample.features) * m
    grad_norm2 = float(np.mean(grad * grad))
    resid_norm2 = float(np.mean(resid * resid))
    inner = float(np.mean(grad * resid))
    if grad_norm2 > 0 and resid_norm2 > 0:
        eps = inner * inner / (grad_norm2 * resid_norm2)
    else:
        eps = 0.0
    return {
        "loss": float(np.mean(_xent_terms(f, y) * m)),
        "grad_norm2": grad_norm2,
        "resid_norm2": resid_norm2,
        "epsilon": eps,
        "h_norm2": float(np.mean(hv * hv)),
        "fit_error": float(np.mean((hv - grad) ** 2)),
    }


def _project_norm(h: Hypothesis, X: np.ndarray, m: np.ndarray, budget: float) -> Hypothesis:
    """Radially shrink ``h`` until mean((h*m)^2) <= budget."""
    def norm2(hyp):
        hv = hyp.evaluate(X) * m
        return float(np.mean(hv * hv))

    if norm2(h) <= budget:
        return h
    raw = h.raw(X) * m
    raw2 = float(np.mean(raw * raw))
    # clipping only shrinks values, so this factor is always feasible
    lo, hi = math.sqrt(budget / raw2), 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if norm2(h.scaled(mid)) <= budget:
            lo = mid
        else:
            hi = mid
    out = h.scaled(lo)
    while norm2(out) > budget:
        lo *= 1.0 - 1e-12
        out = h.scaled(lo)
    return out


def fit_gradient_auditor(sample: AuditSample, scores, labels,
                         config: AuditorConfig | None = None) -> Hypothesis:
    """Smooth cross-entropy auditor.

    Fits the base learner to the smoothed loss derivative on S, projects the
    fit onto {|h|^2 <= L * loss}, and returns the zero hypothesis when the
    restricted loss is at most alpha or the fit is a poor approximation of
    the derivative relative to its angle with the residual.
    """
    config = config or AuditorConfig(kind="gradient")
    alpha = config.alpha if config.alpha is not None else 0.0
    f = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if f.shape[0] != sample.features.shape[0] or y.shape[0] != f.shape[0]:
        raise InvalidInput("scores/labels not aligned with the audit sample")
    pre = gradient_audit_stats(ZeroHypothesis(), sample, f, y, config)
    if pre["loss"] <= alpha or pre["grad_norm2"] == 0 or pre["resid_norm2"] == 0:
        return ZeroHypothesis()

    grad_sample = AuditSample(sample.features,
                              gradient_targets(f, y, config.smoothing_threshold),
                              sample.mask)
    if config.gradient_base == "tree":
        h = fit_tree(grad_sample, config)
    else:
        h = fit_ridge(grad_sample, config)
    h = _project_norm(h, sample.features, sample.mask.astype(float), config.L * pre["loss"])

    stats = gradient_audit_stats(h, sample, f, y, config)
    if stats["fit_error"] > 0.5 * stats["epsilon"] * stats["grad_norm2"]:
        return ZeroHypothesis()
    return h


# --------------------------------------------------------------------------
# Exhaustive set-collection auditor
# --------------------------------------------------------------------------


def fit_set_collection(sample: AuditSample, sets, residual=None):
    """Best of chi_S and -chi_S over a finite collection of sets.

    Returns ``(hypothesis, correlation)`` where correlation is the empirical
    mean of c(x) * r_S(x) over the sample. Earlier sets win ties, and chi_S
    wins over -chi_S.
    """
    sets = list(sets)
    if not sets:
        raise InvalidInput("set collection is empty")
    r = sample.restricted_target if residual is None else (
        np.asarray(residual, dtype=float) * sample.mask)
    n = r.shape[0]
    best, best_corr = None, -np.inf
    for s in sets:
        base = s if not s.negated else s.negate()
        corr = float(base.indicator(sample.features).astype(float) @ r) / n
        for cand, value in ((base, corr), (base.negate(), -corr)):
            if value > best_corr:
                best, best_corr = cand, value
    return best, best_corr


def fit_auditor(config: AuditorConfig, X, target, mask, scores=None, labels=None) -> Hypothesis:
    """Dispatch on ``config.kind`` and return the fitted hypothesis."""
    sample = AuditSample(X, target, mask)
    if config.kind == "ridge":
        return fit_ridge(sample, config)
    if config.kind == "tree":
        return fit_tree(sample, config)
    if config.kind == "gradient":
        if scores is None or labels is None:
            raise InvalidInput("gradient auditor needs scores and labels")
        return fit_gradient_auditor(sample, scores, labels, config)
    h, _ = fit_set_collection(sample, config.sets)
    return h
