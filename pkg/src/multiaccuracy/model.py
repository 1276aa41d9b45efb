"""Black-box predictors and the boosted model built by post-processing.

The boosted model keeps the initial predictor f0 untouched and applies its
updates in log-odds space: starting from z = logit(clamp(f0(x))), every
update on partition S subtracts ``eta * h(x)`` for x in S. This is the
additive form of the multiplicative odds rule q <- exp(-eta h) q.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .audit import Hypothesis, ZeroHypothesis, hypothesis_from_dict
from .errors import FormatError, InvalidInput

MODEL_VERSION = 1
DEFAULT_CLAMP_EPS = 1e-4


def clamp(p, eps: float = DEFAULT_CLAMP_EPS):
    if not 0 < eps < 0.5:
        raise InvalidInput(f"clamp eps must lie in (0, 1/2), got {eps}")
    out = np.minimum(np.maximum(p, eps), 1.0 - eps)
    return float(out) if np.ndim(out) == 0 else out


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def logistic(z):
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


class Partition(str, Enum):
    ALL = "all"
    NEG = "neg"
    POS = "pos"

    def mask(self, base_scores: np.ndarray) -> np.ndarray:
        """Membership from (clamped) initial scores; f0 = 1/2 belongs to NEG."""
        if self is Partition.ALL:
            return np.ones(base_scores.shape[0], dtype=bool)
        if self is Partition.NEG:
            return base_scores <= 0.5
        return base_scores > 0.5


PARTITION_ORDER = (Partition.ALL, Partition.NEG, Partition.POS)


def _features(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise InvalidInput("features must be a vector or a matrix")
    if not np.isfinite(X).all():
        raise InvalidInput("features contain NaN or Inf")
    return X


# --------------------------------------------------------------------------
# Predictors
# --------------------------------------------------------------------------


class Predictor:
    """Anything that maps feature rows to scores in [0, 1]."""

    kind = "abstract"
    trainable = False

    def predict(self, X, groups=None) -> np.ndarray:
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


class ScoresPredictor(Predictor):
    """Fixed scores aligned row-by-row with one dataset."""

    kind = "scores"

    def __init__(self, scores):
        scores = np.asarray(scores, dtype=float).reshape(-1)
        if not np.isfinite(scores).all() or (scores < 0).any() or (scores > 1).any():
            raise InvalidInput("scores must be finite and lie in [0, 1]")
        self.scores = scores

    def predict(self, X, groups=None):
        X = _features(X)
        if X.shape[0] != self.scores.shape[0]:
            raise InvalidInput(
                f"scores file has {self.scores.shape[0]} rows but data has {X.shape[0]}")
        return self.scores.copy()

    def to_dict(self):
        return {"kind": "scores", "scores": [float(s) for s in self.scores]}


class _Standardized:
    """Optional per-feature shift/scale applied before the parametric map."""

    mu = None
    sigma = None

    def _set_scaling(self, mu, sigma):
        self.mu = None if mu is None else np.asarray(mu, dtype=float).reshape(-1)
        self.sigma = None if sigma is None else np.asarray(sigma, dtype=float).reshape(-1)

    def _inputs(self, X, d: int) -> np.ndarray:
        X = _features(X)
        if X.shape[1] != d:
            raise InvalidInput(f"model expects {d} features, got {X.shape[1]}")
        if self.mu is not None:
            X = (X - self.mu) / self.sigma
        return X

    def _scaling_dict(self) -> dict:
        if self.mu is None:
            return {}
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist()}


class LinearPredictor(_Standardized, Predictor):
    kind = "linear"
    trainable = True

    def __init__(self, w, b: float, mu=None, sigma=None):
        self.w = np.asarray(w, dtype=float).reshape(-1)
        self.b = float(b)
        self._set_scaling(mu, sigma)

    def params(self) -> list[np.ndarray]:
        return [self.w, np.array([self.b])]

    def with_params(self, params) -> "LinearPredictor":
        return LinearPredictor(params[0], float(params[1][0]), self.mu, self.sigma)

    def logits(self, X):
        return self._inputs(X, self.w.shape[0]) @ self.w + self.b

    def predict(self, X, groups=None):
        return logistic(self.logits(X))

    def to_dict(self):
        return {"kind": "linear", "w": [float(v) for v in self.w], "b": self.b,
                **self._scaling_dict()}


class MLP2Predictor(_Standardized, Predictor):
    """Two tanh hidden layers followed by a logistic output unit."""

    kind = "mlp2"
    trainable = True

    def __init__(self, W1, b1, W2, b2, w3, b3, mu=None, sigma=None):
        self.W1 = np.asarray(W1, dtype=float)
        self.b1 = np.asarray(b1, dtype=float).reshape(-1)
        self.W2 = np.asarray(W2, dtype=float)
        self.b2 = np.asarray(b2, dtype=float).reshape(-1)
        self.w3 = np.asarray(w3, dtype=float).reshape(-1)
        self.b3 = float(np.asarray(b3).reshape(-1)[0])
        self._set_scaling(mu, sigma)

    def params(self) -> list[np.ndarray]:
        return [self.W1, self.b1, self.W2, self.b2, self.w3, np.array([self.b3])]

    def with_params(self, params) -> "MLP2Predictor":
        return MLP2Predictor(*params, mu=self.mu, sigma=self.sigma)

    @property
    def widths(self) -> tuple[int, int]:
        return self.W1.shape[1], self.W2.shape[1]

    def logits(self, X):
        X = self._inputs(X, self.W1.shape[0])
        a1 = np.tanh(X @ self.W1 + self.b1)
        a2 = np.tanh(a1 @ self.W2 + self.b2)
        return a2 @ self.w3 + self.b3

    def predict(self, X, groups=None):
        return logistic(self.logits(X))

    def to_dict(self):
        return {"kind": "mlp2", "W1": self.W1.tolist(), "b1": self.b1.tolist(),
                "W2": self.W2.tolist(), "b2": self.b2.tolist(),
                "w3": self.w3.tolist(), "b3": self.b3, **self._scaling_dict()}


def group_key(groups: dict, columns, i: int) -> str:
    return "|".join(str(groups[c][i]) for c in columns)


class GroupedPredictor(Predictor):
    """One model per group; needs the sensitive group columns at inference."""

    kind = "grouped"
    requires_sensitive_features = True

    def __init__(self, columns, models: dict):
        self.columns = tuple(columns)
        self.models = dict(models)

    def predict(self, X, groups=None):
        X = _features(X)
        if groups is None:
            raise InvalidInput("grouped predictor needs group columns at inference")
        missing = [c for c in self.columns if c not in groups]
        if missing:
            raise InvalidInput(f"missing group columns {missing}")
        keys = np.array([group_key(groups, self.columns, i) for i in range(X.shape[0])])
        out = np.empty(X.shape[0])
        for key in np.unique(keys):
            rows = keys == key
            if key not in self.models:
                raise InvalidInput(f"no model for group {key!r}")
            out[rows] = self.models[key].predict(X[rows])
        return out

    def to_dict(self):
        return {"kind": "grouped", "columns": list(self.columns),
                "models": {k: m.to_dict() for k, m in sorted(self.models.items())}}


# --------------------------------------------------------------------------
# Boosted model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Update:
    partition: Partition
    hypothesis: Hypothesis
    step_size: float

    def __post_init__(self):
        object.__setattr__(self, "partition", Partition(self.partition))
        if not (np.isfinite(self.step_size) and self.step_size > 0):
            raise InvalidInput(f"step size must be finite and positive, got {self.step_size}")

    def to_dict(self):
        return {"partition": self.partition.value, "eta": float(self.step_size),
                "hypothesis": self.hypothesis.to_dict()}


def apply_update(z: np.ndarray, update: Update, X: np.ndarray,
                 base_scores: np.ndarray, moved: np.ndarray | None = None) -> np.ndarray:
    """One log-odds step. Shared by scoring and by the boosting loop so both agree bitwise.

    ``moved`` (optional, updated in place) flags rows the step actually changed.
    """
    h = update.hypothesis.evaluate(X)
    if update.partition is not Partition.ALL:
        h = np.where(update.partition.mask(base_scores), h, 0.0)
    if moved is not None:
        moved |= h != 0
    return z - update.step_size * h


def scores_from_log_odds(z, base_scores, moved, eps: float = DEFAULT_CLAMP_EPS) -> np.ndarray:
    """clamp(logistic(z)), except rows no update touched keep their base score exactly."""
    return np.where(moved, clamp(logistic(z), eps), base_scores)


@dataclass(frozen=True)
class BoostedModel(Predictor):
    base: Predictor
    updates: tuple = field(default_factory=tuple)
    clamp_eps: float = DEFAULT_CLAMP_EPS

    kind = "boosted"

    def __post_init__(self):
        object.__setattr__(self, "updates", tuple(self.updates))
        if not 0 < self.clamp_eps < 0.5:
            raise InvalidInput("clamp_eps must lie in (0, 1/2)")

    @property
    def trainable(self):
        return False

    def append_update(self, update: Update) -> "BoostedModel":
        return BoostedModel(self.base, self.updates + (update,), self.clamp_eps)

    def base_scores(self, X, groups=None) -> np.ndarray:
        return clamp(self.base.predict(_features(X), groups), self.clamp_eps)

    def state(self, X, groups=None, n_updates: int | None = None):
        """(clamped base scores, log-odds, rows moved by some update)."""
        X = _features(X)
        p0 = self.base_scores(X, groups)
        z = logit(p0)
        moved = np.zeros(X.shape[0], dtype=bool)
        for update in self.updates[:n_updates]:
            z = apply_update(z, update, X, p0, moved)
        return p0, z, moved

    def log_odds(self, X, groups=None, n_updates: int | None = None) -> np.ndarray:
        return self.state(X, groups, n_updates)[1]

    def predict(self, X, groups=None, n_updates: int | None = None) -> np.ndarray:
        p0, z, moved = self.state(X, groups, n_updates)
        return scores_from_log_odds(z, p0, moved, self.clamp_eps)

    def score(self, features, groups=None) -> float:
        """Score a single feature vector."""
        return float(self.predict(np.asarray(features, dtype=float)[None, :], groups)[0])

    def round_effect(self, X, round_index: int, groups=None) -> np.ndarray:
        """Values of the ``round_index``-th (0-based) update's hypothesis as applied."""
        X = _features(X)
        update = self.updates[round_index]
        h = update.hypothesis.evaluate(X)
        if update.partition is not Partition.ALL:
            h = np.where(update.partition.mask(self.base_scores(X, groups)), h, 0.0)
        return h

    def to_dict(self):
        return {"kind": "boosted", "version": MODEL_VERSION, "clamp_eps": self.clamp_eps,
                "base": self.base.to_dict(),
                "updates": [u.to_dict() for u in self.updates]}


def score(model: BoostedModel, features) -> float:
    return model.score(features)


def append_update(model: BoostedModel, update: Update) -> BoostedModel:
    return model.append_update(update)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def predictor_from_dict(d, path: str = "$") -> Predictor:
    if not isinstance(d, dict):
        raise FormatError("predictor must be a JSON object", path)
    kind = d.get("kind", "boosted" if "updates" in d else None)
    try:
        if kind == "scores":
            return ScoresPredictor(d["scores"])
        if kind == "linear":
            return LinearPredictor(d["w"], d["b"], d.get("mu"), d.get("sigma"))
        if kind == "mlp2":
            return MLP2Predictor(d["W1"], d["b1"], d["W2"], d["b2"], d["w3"], d["b3"],
                                 d.get("mu"), d.get("sigma"))
        if kind == "grouped":
            models = {k: predictor_from_dict(v, f"{path}.models[{k!r}]")
                      for k, v in d["models"].items()}
            return GroupedPredictor(d["columns"], models)
        if kind == "boosted":
            version = d.get("version", MODEL_VERSION)
            if version != MODEL_VERSION:
                raise FormatError(f"unsupported model version {version}", path + ".version")
            updates = []
            for i, u in enumerate(d["updates"]):
                upath = f"{path}.updates[{i}]"
                if not isinstance(u, dict):
                    raise FormatError("update must be an object", upath)
                try:
                    updates.append(Update(Partition(u["partition"]),
                                          hypothesis_from_dict(u["hypothesis"], upath + ".hypothesis"),
                                          float(u["eta"])))
                except KeyError as exc:
                    raise FormatError(f"update missing field {exc}", upath) from None
                except ValueError as exc:
                    raise FormatError(str(exc), upath) from None
            return BoostedModel(predictor_from_dict(d["base"], path + ".base"), updates,
                                float(d.get("clamp_eps", DEFAULT_CLAMP_EPS)))
    except KeyError as exc:
        raise FormatError(f"missing field {exc}", path) from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"bad {kind} payload: {exc}", path) from None
    raise FormatError(f"unknown predictor kind {kind!r}", path)


def serialize(model: Predictor) -> bytes:
    return (json.dumps(model.to_dict(), indent=1) + "\n").encode("utf-8")


def deserialize(data: bytes | str) -> Predictor:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("model file is not UTF-8", f"byte {exc.start}") from None
    try:
        obj = json.loads(data)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed model JSON: {exc.msg}",
                          f"line {exc.lineno} column {exc.colno} (char {exc.pos})") from None
    return predictor_from_dict(obj)


def save_model(model: Predictor, path) -> None:
    Path(path).write_bytes(serialize(model))


def read_scores_csv(path) -> ScoresPredictor:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["score"]:
            raise FormatError("scores file needs a single 'score' header column", f"{path}:1")
        values = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 1:
                raise FormatError("expected exactly one value per row", f"{path}:{lineno}")
            try:
                values.append(float(row[0]))
            except ValueError:
                raise FormatError(f"unparseable score {row[0]!r}", f"{path}:{lineno}") from None
    try:
        return ScoresPredictor(values)
    except InvalidInput as exc:
        raise FormatError(str(exc), str(path)) from None


def write_scores_csv(scores, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("score\n")
        for s in np.asarray(scores, dtype=float):
            fh.write(repr(float(s)) + "\n")


def load_predictor(path) -> Predictor:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_scores_csv(path)
    return deserialize(path.read_bytes())


def as_boosted(predictor: Predictor, clamp_eps: float = DEFAULT_CLAMP_EPS) -> BoostedModel:
    if isinstance(predictor, BoostedModel):
        return predictor
    return BoostedModel(predictor, (), clamp_eps)


__all__ = [
    "BoostedModel", "GroupedPredictor", "LinearPredictor", "MLP2Predictor", "Partition",
    "Predictor", "ScoresPredictor", "Update", "ZeroHypothesis", "append_update",
    "apply_update", "as_boosted", "clamp", "deserialize", "load_predictor", "logistic",
    "logit", "scores_from_log_odds", "predictor_from_dict", "read_scores_csv", "save_model", "score", "serialize",
    "write_scores_csv",
]
