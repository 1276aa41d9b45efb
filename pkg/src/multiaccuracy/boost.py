"""Multiaccuracy Boost: audit on {all, f0-negative, f0-positive}, update, repeat."""
from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .audit import AuditorConfig, Hypothesis, fit_auditor
from .errors import InvalidInput
from .metrics import cross_entropy
from .model import (DEFAULT_CLAMP_EPS, PARTITION_ORDER, BoostedModel, Partition,
                    Predictor, Update, apply_update, as_boosted, scores_from_log_odds)

log = logging.getLogger(__name__)

BATCH_STRATEGIES = ("folds", "single")


@dataclass(frozen=True)
class BoostConfig:
    alpha: float = 0.05
    eta: float | None = None  # None -> alpha / 4
    max_iterations: int = 100
    batch_strategy: str = "folds"
    folds: int | None = None  # None -> min(max_iterations, 5)
    auditor: AuditorConfig = field(default_factory=AuditorConfig)
    # False audits E[h (f - y)] over the whole batch instead of restricting to S
    restrict_correlation: bool = True
    clamp_eps: float = DEFAULT_CLAMP_EPS
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidInput("alpha must be > 0")
        if self.eta is not None and not (np.isfinite(self.eta) and self.eta > 0):
            raise InvalidInput("eta must be > 0")
        if self.max_iterations < 1:
            raise InvalidInput("max_iterations must be >= 1")
        if self.batch_strategy not in BATCH_STRATEGIES:
            raise InvalidInput(f"batch_strategy must be one of {BATCH_STRATEGIES}")
        if self.folds is not None and self.folds < 1:
            raise InvalidInput("folds must be >= 1")

    @property
    def step_size(self) -> float:
        return self.alpha / 4.0 if self.eta is None else float(self.eta)

    @property
    def n_folds(self) -> int:
        return self.folds if self.folds is not None else min(self.max_iterations, 5)

    @property
    def run_auditor(self) -> AuditorConfig:
        """Auditor config with the gradient auditor's alpha defaulted to the boost alpha."""
        if self.auditor.alpha is None:
            return dataclasses.replace(self.auditor, alpha=self.alpha)
        return self.auditor

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "eta": self.step_size,
                "max_iterations": self.max_iterations,
                "batch_strategy": self.batch_strategy,
                "folds": self.n_folds if self.batch_strategy == "folds" else None,
                "auditor": self.run_auditor.to_dict(),
                "restrict_correlation": self.restrict_correlation,
                "clamp_eps": self.clamp_eps, "seed": self.seed}


def make_batches(n: int, strategy: str = "folds", T_max: int = 100, seed: int = 0,
                 k: int = 5) -> list[np.ndarray]:
    """Row-index batches D_0 .. D_T (T_max + 1 of them).

    ``folds`` splits a seeded permutation into k folds used round-robin;
    ``single`` reuses the whole index set every round.
    """
    if strategy not in BATCH_STRATEGIES:
        raise InvalidInput(f"unknown batch strategy {strategy!r}")
    if n < 1:
        raise InvalidInput("cannot batch an empty audit set")
    everything = np.arange(n)
    if strategy == "single":
        return [everything] * (T_max + 1)
    if k > n:
        raise InvalidInput(f"cannot split {n} rows into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = [np.sort(f) for f in np.array_split(perm, k)]
    return [folds[t % k] for t in range(T_max + 1)]


def correlation(h, scores, labels, mask=None, features=None) -> float:
    """(1/n) sum_i h(x_i) (f(x_i) - y_i) m_i over the whole batch."""
    f = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    hv = h.evaluate(features) if isinstance(h, Hypothesis) else np.asarray(h, dtype=float)
    prod = hv * (f - y)
    if mask is not None:
        prod = np.where(mask, prod, 0.0)
    return float(np.mean(prod))


@dataclass
class PartitionAudit:
    partition: Partition
    hypothesis: Hypothesis
    correlation: float
    rows: int


def audit_round(X, labels, base_scores, scores, batch, config: BoostConfig) -> list[PartitionAudit]:
    """Fit the auditor on each non-empty partition of the batch.

    Partition membership uses the clamped initial scores; ``scores`` are the
    current model's scores on the same rows as ``X``.
    """
    Xb = X[batch]
    yb = labels[batch]
    fb = scores[batch]
    pb = base_scores[batch]
    auditor = config.run_auditor
    resid = fb - yb
    out = []
    for part in PARTITION_ORDER:
        m = part.mask(pb)
        if not m.any():
            continue
        h = fit_auditor(auditor, Xb, resid, m, fb, yb)
        corr_mask = m if config.restrict_correlation else None
        out.append(PartitionAudit(part, h, correlation(h, fb, yb, corr_mask, Xb), int(m.sum())))
    if not out:
        raise InvalidInput("every partition is empty")
    return out


def select(audits: list[PartitionAudit]) -> PartitionAudit:
    """Largest correlation; ties go to the earlier partition (all, neg, pos)."""
    best = audits[0]
    for a in audits[1:]:
        if a.correlation > best.correlation:
            best = a
    return best


@dataclass
class BoostTrace:
    records: list = field(default_factory=list)
    reason: str = ""
    final_t: int = 0
    final_correlations: dict = field(default_factory=dict)
    final_xent: float = float("nan")
    config: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.records)

    def summary(self) -> dict:
        return {"reason": self.reason, "iterations": self.iterations, "final_t": self.final_t,
                "final_correlations": self.final_correlations,
                "final_max_correlation": max(self.final_correlations.values(), default=0.0),
                "final_xent": self.final_xent, "config": self.config}

    def to_jsonl(self) -> str:
        lines = [json.dumps(r) for r in self.records]
        lines.append(json.dumps({"summary": self.summary()}))
        return "\n".join(lines) + "\n"


def _labels_and_features(data):
    X = np.asarray(data.X, dtype=float)
    y = np.asarray(data.y, dtype=float)
    groups = getattr(data, "groups", None)
    if X.shape[0] == 0:
        raise InvalidInput("audit data is empty")
    if y.shape[0] != X.shape[0]:
        raise InvalidInput("labels not aligned with features")
    return X, y, groups


def run_boost(base: Predictor, audit_data, config: BoostConfig | None = None):
    """Post-process ``base`` on ``audit_data``; returns (BoostedModel, BoostTrace).

    ``audit_data`` needs ``X`` and ``y`` attributes (a Dataset works). A
    BoostedModel base is extended rather than wrapped.
    """
    config = config or BoostConfig()
    X, y, groups = _labels_and_features(audit_data)
    n = X.shape[0]
    model = as_boosted(base, config.clamp_eps)
    eta = config.step_size
    p0, z, moved = model.state(X, groups, None)
    scores = scores_from_log_odds(z, p0, moved, model.clamp_eps)
    batches = make_batches(n, config.batch_strategy, config.max_iterations, config.seed,
                           config.n_folds)
    trace = BoostTrace(config=config.to_dict())

    for t in range(config.max_iterations + 1):
        batch = batches[t]
        audits = audit_round(X, y, p0, scores, batch, config)
        best = select(audits)
        correlations = {a.partition.value: a.correlation for a in audits}
        xent_before = cross_entropy(scores[batch], y[batch])
        if best.correlation <= config.alpha or t == config.max_iterations:
            trace.reason = "converged" if best.correlation <= config.alpha else "max-iterations"
            trace.final_t = t
            trace.final_correlations = correlations
            trace.final_xent = xent_before
            log.info("boost stopped at t=%d (%s), max correlation %.6g", t, trace.reason,
                     best.correlation)
            return model, trace

        update = Update(best.partition, best.hypothesis, eta)
        model = model.append_update(update)
        z = apply_update(z, update, X, p0, moved)
        scores = scores_from_log_odds(z, p0, moved, model.clamp_eps)
        xent_after = cross_entropy(scores[batch], y[batch])

        hv = best.hypothesis.evaluate(X[batch])
        if best.partition is not Partition.ALL:
            hv = np.where(best.partition.mask(p0[batch]), hv, 0.0)
        record = {"t": t, "partition": best.partition.value, "correlation": best.correlation,
                  "xent_before": xent_before, "xent_after": xent_after,
                  "h_norm2": float(np.mean(hv * hv)), "eta": eta, "batch_size": int(len(batch)),
                  "correlations": correlations, "hypothesis": best.hypothesis.to_dict()}
        trace.records.append(record)
        log.debug("t=%d S*=%s corr=%.6g xent %.6f -> %.6f", t, best.partition.value,
                  best.correlation, xent_before, xent_after)
    raise AssertionError("unreachable")


def reaudit(model: BoostedModel, audit_data, batch, config: BoostConfig) -> list[PartitionAudit]:
    """Run the configured auditor against ``model`` on one batch of the audit data."""
    X, y, groups = _labels_and_features(audit_data)
    return audit_round(X, y, model.base_scores(X, groups), model.predict(X, groups),
                       np.asarray(batch), config)


def iteration_budget(initial_xent: float, alpha: float) -> int:
    """ceil(16 * loss(f0) / alpha^2): update budget when eta = alpha / 4."""
    return int(np.ceil(16.0 * initial_xent / alpha ** 2))
