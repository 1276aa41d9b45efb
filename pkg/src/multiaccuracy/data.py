"""Datasets, CSV ingestion, seeded splits and synthetic generators."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from statistics import NormalDist

import numpy as np

from .errors import FormatError, InvalidInput
from .model import ScoresPredictor, logistic

GROUP_PREFIX = "group:"


@dataclass
class Dataset:
    """Features, binary labels and evaluation-only group columns.

    ``groups`` maps a column name (without the ``group:`` prefix) to a
    per-row array of string labels. Group columns are never part of ``X``.
    """

    X: np.ndarray
    y: np.ndarray
    feature_names: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)
    note: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        if self.X.ndim != 2:
            raise InvalidInput("feature matrix must be 2-D")
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        n, d = self.X.shape
        if self.y.shape[0] != n:
            raise InvalidInput("labels and features differ in length")
        if not np.isfinite(self.X).all():
            raise InvalidInput("features contain NaN or Inf")
        if not np.isin(self.y, (0.0, 1.0)).all():
            raise InvalidInput("labels must be 0 or 1")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(d)]
        if len(self.feature_names) != d:
            raise InvalidInput("feature_names length does not match the feature matrix")
        self.groups = {k: np.asarray(v).astype(str) for k, v in self.groups.items()}
        for k, v in self.groups.items():
            if v.shape[0] != n:
                raise InvalidInput(f"group column {k!r} has {v.shape[0]} rows, expected {n}")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], list(self.feature_names),
                       {k: v[idx] for k, v in self.groups.items()}, self.note)

    def with_groups_as_features(self) -> "Dataset":
        """One-hot encode the group columns and append them to the features."""
        cols, names = [self.X], list(self.feature_names)
        for k in sorted(self.groups):
            for level in sorted(set(self.groups[k])):
                cols.append((self.groups[k] == level).astype(float)[:, None])
                names.append(f"{GROUP_PREFIX}{k}={level}")
        return Dataset(np.hstack(cols), self.y, names, dict(self.groups), self.note)


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


@dataclass
class Schema:
    label_column: str = "label"
    group_prefix: str = GROUP_PREFIX
    one_hot: dict = field(default_factory=dict)
    include_groups: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        unknown = set(d) - {"label_column", "group_prefix", "one_hot", "include_groups"}
        if unknown:
            raise FormatError(f"unknown schema keys {sorted(unknown)}")
        return cls(d.get("label_column", "label"), d.get("group_prefix", GROUP_PREFIX),
                   {k: [str(c) for c in v] for k, v in d.get("one_hot", {}).items()},
                   bool(d.get("include_groups", False)))

    def to_dict(self) -> dict:
        return {"label_column": self.label_column, "group_prefix": self.group_prefix,
                "one_hot": self.one_hot, "include_groups": self.include_groups}


def load_schema(path) -> Schema:
    try:
        return Schema.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed schema JSON: {exc.msg}", f"{path}:{exc.lineno}") from None


def save_schema(schema: Schema, path) -> None:
    Path(path).write_text(json.dumps(schema.to_dict(), indent=1) + "\n", encoding="utf-8")


def load_csv(path, schema: Schema | dict | None = None) -> Dataset:
    """Parse a dataset CSV.

    Columns starting with the group prefix become group columns; columns
    listed under ``one_hot`` are expanded into indicator features; every other
    column except the label is parsed as a float feature.
    """
    if schema is None:
        schema = Schema()
    elif isinstance(schema, dict):
        schema = Schema.from_dict(schema)
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise FormatError("missing header row", f"{path}:1")
        header = [h.strip() for h in header]
        if schema.label_column not in header:
            raise FormatError(f"label column {schema.label_column!r} not found", f"{path}:1")
        missing = [c for c in schema.one_hot if c not in header]
        if missing:
            raise FormatError(f"one-hot columns {missing} not in header", f"{path}:1")
        label_at = header.index(schema.label_column)
        group_at = {h[len(schema.group_prefix):]: j for j, h in enumerate(header)
                    if h.startswith(schema.group_prefix)}
        plan = []  # (column index, header name, categories or None)
        names = []
        for j, h in enumerate(header):
            if j == label_at or h.startswith(schema.group_prefix):
                continue
            cats = schema.one_hot.get(h)
            plan.append((j, h, cats))
            names.extend([f"{h}={c}" for c in cats] if cats is not None else [h])

        rows, labels = [], []
        groups = {g: [] for g in group_at}
        for lineno, raw in enumerate(reader, start=2):
            if not raw:
                continue
            if len(raw) != len(header):
                raise FormatError(f"expected {len(header)} fields, got {len(raw)}",
                                  f"{path}:{lineno}")
            cell = raw[label_at].strip()
            try:
                label = float(cell)
            except ValueError:
                raise FormatError(f"unparseable label {cell!r}",
                                  f"{path}:{lineno}:{schema.label_column}") from None
            if label not in (0.0, 1.0):
                raise FormatError(f"label must be 0 or 1, got {cell!r}",
                                  f"{path}:{lineno}:{schema.label_column}")
            values = []
            for j, h, cats in plan:
                cell = raw[j].strip()
                if cats is not None:
                    if cell not in cats:
                        raise FormatError(f"unknown category {cell!r}", f"{path}:{lineno}:{h}")
                    values.extend(1.0 if cell == c else 0.0 for c in cats)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise FormatError(f"unparseable value {cell!r}", f"{path}:{lineno}:{h}") from None
                if not np.isfinite(v):
                    raise FormatError(f"non-finite value {cell!r}", f"{path}:{lineno}:{h}")
                values.append(v)
            rows.append(values)
            labels.append(label)
            for g, j in group_at.items():
                groups[g].append(raw[j].strip())

    X = np.array(rows, dtype=float).reshape(len(rows), len(names))
    data = Dataset(X, np.array(labels), names, {g: np.array(v, dtype=str) for g, v in groups.items()},
                   note=f"loaded from {path.name}")
    return data.with_groups_as_features() if schema.include_groups else data


def write_csv(data: Dataset, path, label_column: str = "label") -> None:
    group_cols = sorted(data.groups)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(data.feature_names) + [label_column]
                        + [GROUP_PREFIX + g for g in group_cols])
        for i in range(data.n):
            writer.writerow([repr(float(v)) for v in data.X[i]] + [str(int(data.y[i]))]
                            + [data.groups[g][i] for g in group_cols])


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


def split_indices(n: int, fractions, seed: int = 0) -> list[np.ndarray]:
    fractions = [float(f) for f in fractions]
    if not fractions or any(not f > 0 for f in fractions):
        raise InvalidInput("split fractions must be positive")
    total = sum(fractions)
    if total > 1 + 1e-9:
        raise InvalidInput(f"split fractions sum to {total:.6g} > 1")
    sizes = [int(round(n * f)) for f in fractions]
    if abs(total - 1) <= 1e-9:
        sizes[-1] = n - sum(sizes[:-1])
    if any(s <= 0 for s in sizes) or sum(sizes) > n:
        raise InvalidInput(f"fractions {fractions} give part sizes {sizes} for n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    cuts = np.cumsum(sizes)[:-1]
    return [np.sort(p) for p in np.split(perm[:sum(sizes)], cuts)]


def split(data: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple:
    """Seeded disjoint split; returns one Dataset per fraction (train, audit, test)."""
    return tuple(data.subset(idx) for idx in split_indices(data.n, fractions, seed))


# --------------------------------------------------------------------------
# Semi-synthetic subgroup-polynomial task
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Four age/sex subgroups, each with its own polynomial label function.

    Defaults follow the disease-prediction setup: orders 1, 4, 2, 6 for OF,
    OM, YF, YM and group proportions 15.0 / 19.7 / 24.6 / 40.7 %.
    """

    n: int = 40000
    d: int = 20
    groups: tuple = (("O", "F"), ("O", "M"), ("Y", "F"), ("Y", "M"))
    orders: tuple = (1, 4, 2, 6)
    mix: tuple = (0.150, 0.197, 0.246, 0.407)
    support: int = 10  # label polynomials use only the first `support` features
    block: int = 2  # features per group inside the support
    proxy_shift: float = 1.5
    trend: float = 3.0  # added to |c_1| so the linear term dominates
    seed: int = 0

    def __post_init__(self):
        k = len(self.groups)
        if len(self.orders) != k or len(self.mix) != k:
            raise InvalidInput("groups, orders and mix must have the same length")
        if any(o < 1 for o in self.orders):
            raise InvalidInput("polynomial orders must be >= 1")
        if any(p < 0 for p in self.mix) or abs(sum(self.mix) - 1) > 1e-6:
            raise InvalidInput(f"mix proportions must be >= 0 and sum to 1, got {sum(self.mix):.6g}")
        if self.n < 1:
            raise InvalidInput("n must be >= 1")
        if self.block < 1 or self.support < self.block * k:
            raise InvalidInput("need support >= block * number of groups")
        if self.d < self.support + 4:
            raise InvalidInput("need d >= support + 4 (four proxy features)")


def generate_semisynth(spec: SynthSpec | None = None) -> Dataset:
    """Sample the semi-synthetic dataset.

    Features are standard normal. The four features right after the support
    carry a +-proxy_shift offset (two by sex, two by age), so group membership
    is partially recoverable from the features, as it is for real phenotypes.
    Group k owns support features [k*block, (k+1)*block); its label is 1 iff
    sum_j c_j u^j exceeds the group median, where u is the projection of those
    features on a random unit direction and c_j ~ N(0, 1) / j!, with the
    linear coefficient pushed away from zero by ``trend`` so every group has a
    dominant trend.
    """
    spec = spec or SynthSpec()
    rng = np.random.default_rng(spec.seed)
    g = rng.choice(len(spec.groups), size=spec.n, p=np.asarray(spec.mix, dtype=float))
    X = rng.standard_normal((spec.n, spec.d))

    ages = np.array([a for a, _ in spec.groups])[g]
    sexes = np.array([s for _, s in spec.groups])[g]
    age_levels = sorted(set(a for a, _ in spec.groups))
    sex_levels = sorted(set(s for _, s in spec.groups))
    s0 = spec.support
    sex_sign = np.where(sexes == sex_levels[0], 1.0, -1.0)
    age_sign = np.where(ages == age_levels[0], 1.0, -1.0)
    X[:, s0:s0 + 2] += spec.proxy_shift * sex_sign[:, None]
    X[:, s0 + 2:s0 + 4] += spec.proxy_shift * age_sign[:, None]

    y = np.zeros(spec.n)
    for k, order in enumerate(spec.orders):
        v = rng.standard_normal(spec.block)
        v /= np.linalg.norm(v)
        coef = rng.standard_normal(order) / np.array([math.factorial(j + 1) for j in range(order)])
        coef[0] = np.sign(coef[0]) * (spec.trend + abs(coef[0]))
        rows = g == k
        if not rows.any():
            continue
        u = X[rows, k * spec.block:(k + 1) * spec.block] @ v
        poly = sum(coef[j] * u ** (j + 1) for j in range(order))
        y[rows] = (poly > np.median(poly)).astype(float)

    names = [f"x{j}" for j in range(spec.d)]
    return Dataset(X, y, names, {"age": ages, "sex": sexes},
                   note=f"semi-synthetic subgroup polynomials, seed {spec.seed}")


# --------------------------------------------------------------------------
# Planted adversarial bias
# --------------------------------------------------------------------------


def generate_adversarial(n: int = 5000, d: int = 5, target_group_mass: float = 0.1,
                         flip_rate: float = 1.0, seed: int = 0, label_noise: float = 0.1):
    """Dataset with a hidden group (x0 above a normal quantile) and a biased scorer.

    Labels are 1[x[1:] . w + label_noise * e > 0]. The scorer outputs
    logistic(4 x[1:] . w), which is accurate, except that inside the hidden
    group a ``flip_rate`` fraction of rows get 1 - score.
    Returns (Dataset, ScoresPredictor).
    """
    if not 0 < target_group_mass < 1:
        raise InvalidInput("target_group_mass must lie in (0, 1)")
    if not 0 <= flip_rate <= 1:
        raise InvalidInput("flip_rate must lie in [0, 1]")
    if d < 2:
        raise InvalidInput("need at least two features")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    w = rng.standard_normal(d - 1)
    w /= np.linalg.norm(w)
    margin = X[:, 1:] @ w
    y = (margin + label_noise * rng.standard_normal(n) > 0).astype(float)
    cut = NormalDist().inv_cdf(1.0 - target_group_mass)
    hidden = X[:, 0] > cut
    scores = logistic(4.0 * margin)
    flip = hidden & (rng.random(n) < flip_rate)
    scores = np.where(flip, 1.0 - scores, scores)
    groups = {"hidden": np.where(hidden, "in", "out")}
    data = Dataset(X, y, [f"x{j}" for j in range(d)], groups,
                   note=f"planted bias: x0 > {cut:.4f}, flip_rate {flip_rate}")
    return data, ScoresPredictor(scores)


def hidden_group_cut(target_group_mass: float) -> float:
    return NormalDist().inv_cdf(1.0 - target_group_mass)
