"""Trainers for the initial model f0 and the comparison baselines.

Everything is full-batch and seeded, so training is deterministic. The
objective is the mean logistic cross-entropy (computed from logits, hence
always finite) plus (l2/2) * |weights|^2; biases are not penalized.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import EmptyGroup, InvalidInput, TrainingError, UnsupportedBaseline
from .model import GroupedPredictor, LinearPredictor, MLP2Predictor, group_key, logistic

log = logging.getLogger(__name__)

MODEL_KINDS = ("logistic", "mlp2")


@dataclass(frozen=True)
class TrainConfig:
    kind: str = "mlp2"
    learning_rate: float = 0.01
    epochs: int = 600
    l2: float = 1e-4
    hidden: tuple = (32, 16)
    optimizer: str = "adam"  # "adam" or plain "gd"
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise InvalidInput(f"model kind must be one of {MODEL_KINDS}")
        if not self.learning_rate > 0:
            raise InvalidInput("learning_rate must be > 0")
        if self.epochs < 0:
            raise InvalidInput("epochs must be >= 0")
        if self.l2 < 0:
            raise InvalidInput("l2 must be >= 0")
        if len(self.hidden) != 2 or any(int(h) < 1 for h in self.hidden):
            raise InvalidInput("hidden must be two positive widths")
        if self.optimizer not in ("adam", "gd"):
            raise InvalidInput("optimizer must be 'adam' or 'gd'")

    def to_dict(self):
        return {"kind": self.kind, "learning_rate": self.learning_rate, "epochs": self.epochs,
                "l2": self.l2, "hidden": list(self.hidden), "optimizer": self.optimizer,
                "standardize": self.standardize, "seed": self.seed}


# weight tensors that receive the l2 penalty, by parameter position
_PENALIZED = {"logistic": (0,), "mlp2": (0, 2, 4)}


def loss_and_grad(kind: str, params, X, y, l2: float = 0.0):
    """Objective value and its gradient w.r.t. every parameter array.

    ``params`` is [w, b] for logistic and [W1, b1, W2, b2, w3, b3] for mlp2;
    ``X`` is already standardized.
    """
    n = X.shape[0]
    if kind == "logistic":
        w, b = params
        z = X @ w + b[0]
        dz = (logistic(z) - y) / n
        grads = [X.T @ dz, np.array([dz.sum()])]
    else:
        W1, b1, W2, b2, w3, b3 = params
        a1 = np.tanh(X @ W1 + b1)
        a2 = np.tanh(a1 @ W2 + b2)
        z = a2 @ w3 + b3[0]
        dz = (logistic(z) - y) / n
        d2 = np.outer(dz, w3) * (1.0 - a2 * a2)
        d1 = (d2 @ W2.T) * (1.0 - a1 * a1)
        grads = [X.T @ d1, d1.sum(axis=0), a1.T @ d2, d2.sum(axis=0), a2.T @ dz,
                 np.array([dz.sum()])]
    loss = float(np.mean(np.logaddexp(0.0, z) - y * z))
    for i in _PENALIZED[kind]:
        loss += 0.5 * l2 * float(np.sum(params[i] ** 2))
        grads[i] = grads[i] + l2 * params[i]
    return loss, grads


def init_params(kind: str, d: int, hidden=(32, 16), seed: int = 0):
    rng = np.random.default_rng(seed)
    if kind == "logistic":
        return [np.zeros(d), np.zeros(1)]
    h1, h2 = (int(h) for h in hidden)
    return [rng.standard_normal((d, h1)) / np.sqrt(d), np.zeros(h1),
            rng.standard_normal((h1, h2)) / np.sqrt(h1), np.zeros(h2),
            rng.standard_normal(h2) / np.sqrt(h2), np.zeros(1)]


def _optimize(kind, params, X, y, config: TrainConfig):
    params = [p.astype(float).copy() for p in params]
    lr = config.learning_rate
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    for epoch in range(1, config.epochs + 1):
        loss, grads = loss_and_grad(kind, params, X, y, config.l2)
        if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
            raise TrainingError("training diverged (non-finite loss)", epoch)
        for i, g in enumerate(grads):
            if config.optimizer == "gd":
                params[i] -= lr * g
                continue
            m[i] = b1 * m[i] + (1 - b1) * g
            v[i] = b2 * v[i] + (1 - b2) * g * g
            mhat = m[i] / (1 - b1 ** epoch)
            vhat = v[i] / (1 - b2 ** epoch)
            params[i] -= lr * mhat / (np.sqrt(vhat) + eps)
        if epoch % 100 == 0:
            log.debug("epoch %d loss %.6f", epoch, loss)
    return params


def _scaling(X, standardize: bool):
    if not standardize:
        return None, None
    mu = X.mean(axis=0)
    sigma = X.std(axis=0)
    sigma = np.where(sigma > 0, sigma, 1.0)
    return mu, sigma


def train_f0(train, config: TrainConfig | None = None):
    """Fit a logistic or two-hidden-layer model on ``train`` (a Dataset)."""
    config = config or TrainConfig()
    X = np.asarray(train.X, dtype=float)
    y = np.asarray(train.y, dtype=float)
    if X.shape[0] == 0:
        raise InvalidInput("training data is empty")
    mu, sigma = _scaling(X, config.standardize)
    Xs = X if mu is None else (X - mu) / sigma
    params = _optimize(config.kind, init_params(config.kind, X.shape[1], config.hidden, config.seed),
                       Xs, y, config)
    if config.kind == "logistic":
        return LinearPredictor(params[0], float(params[1][0]), mu, sigma)
    return MLP2Predictor(*params, mu=mu, sigma=sigma)


def _kind_of(predictor) -> str:
    if isinstance(predictor, LinearPredictor):
        return "logistic"
    if isinstance(predictor, MLP2Predictor):
        return "mlp2"
    raise UnsupportedBaseline(
        f"cannot retrain a {getattr(predictor, 'kind', type(predictor).__name__)} predictor")


def retrain_baseline(f0, audit, config: TrainConfig | None = None):
    """RT baseline: warm-start from f0's parameters and keep training on the audit set."""
    kind = _kind_of(f0)
    config = config or TrainConfig(kind=kind)
    X = np.asarray(audit.X, dtype=float)
    Xs = f0._inputs(X, X.shape[1])
    params = _optimize(kind, f0.params(), Xs, np.asarray(audit.y, dtype=float), config)
    return f0.with_params(params)


def subgroup_specific_baseline(audit, columns, config: TrainConfig | None = None,
                               expected=None) -> GroupedPredictor:
    """SS baseline: one model per joint value of the group ``columns``.

    ``expected`` optionally lists group keys ("a|b") that must all be present.
    """
    config = config or TrainConfig()
    columns = list(columns)
    for c in columns:
        if c not in audit.groups:
            raise InvalidInput(f"unknown group column {c!r}")
    keys = np.array([group_key(audit.groups, columns, i) for i in range(audit.n)])
    wanted = list(expected) if expected is not None else sorted(set(keys))
    models = {}
    for key in wanted:
        rows = np.flatnonzero(keys == key)
        if rows.size == 0:
            raise EmptyGroup(f"group {key!r} has no audit rows")
        models[key] = train_f0(audit.subset(rows), config)
    return GroupedPredictor(columns, models)
