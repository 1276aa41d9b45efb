"""Command-line interface: synth, split, train-f0, boost, evaluate, diagnose, baseline.

Every command writes its outputs plus a ``manifest-<command>.json`` into
``--out-dir``. Exit codes: 0 success, 2 usage or input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audit import AuditorConfig, SetHypothesis, hypothesis_from_dict
from .baselines import TrainConfig, retrain_baseline, subgroup_specific_baseline, train_f0
from .boost import BoostConfig, run_boost
from .data import (Dataset, Schema, SynthSpec, generate_adversarial, generate_semisynth,
                   load_csv, load_schema, save_schema, split_indices, write_csv)
from .errors import (EmptyGroup, FormatError, InvalidInput, MultiaccuracyError,
                     UnsupportedBaseline)
from .metrics import format_table, group_specs, metrics_report
from .model import (BoostedModel, GroupedPredictor, ScoresPredictor, clamp, load_predictor,
                    read_scores_csv, save_model, write_scores_csv)

log = logging.getLogger("multiaccuracy")

USAGE_ERRORS = (InvalidInput, FormatError, EmptyGroup, UnsupportedBaseline,
                FileNotFoundError, IsADirectoryError)


class UsageError(InvalidInput):
    pass


def _floats(flag: str, text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def _ints(flag: str, text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}") from None


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, args):
        self.args = args
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.inputs = {}
        self.outputs = []

    def input(self, path):
        if path is not None:
            self.inputs[str(path)] = _sha256(path)
        return path

    def output(self, name) -> Path:
        path = Path(name)
        if not path.is_absolute():
            path = self.out_dir / path
        path.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(str(path))
        return path

    def write_json(self, name, obj) -> Path:
        path = self.output(name)
        path.write_text(json.dumps(obj, indent=1, sort_keys=False) + "\n", encoding="utf-8")
        return path

    def write_text(self, name, text) -> Path:
        path = self.output(name)
        path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        return path

    def finish(self):
        config = {k: v for k, v in sorted(vars(self.args).items())
                  if k not in ("func", "verbose")}
        manifest = {"command": self.args.command, "config": config, "inputs": self.inputs,
                    "seed": self.args.seed, "tool_version": __version__,
                    "outputs": sorted(set(self.outputs))}
        path = self.out_dir / f"manifest-{self.args.command}.json"
        path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")

    def show(self, table: str | None, obj) -> None:
        fmt = self.args.format
        if table is not None and fmt in ("table", "both"):
            print(table)
        if fmt in ("json", "both") and obj is not None:
            print(json.dumps(obj, indent=1))


def _load_data(run: Run, path, schema_path=None) -> Dataset:
    run.input(path)
    schema = load_schema(run.input(schema_path)) if schema_path else Schema()
    return load_csv(path, schema)


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    run = Run(args)
    fractions = _floats("--split", args.split) if args.split else None
    if args.adversarial:
        n = args.n if args.n is not None else 5000
        d = args.d if args.d is not None else 5
        try:
            data, scores = generate_adversarial(n, d, args.group_mass, args.flip_rate, args.seed)
        except InvalidInput as exc:
            raise UsageError(f"--group-mass/--flip-rate: {exc}") from None
    else:
        mix = _floats("--mix", args.mix)
        orders = _ints("--orders", args.orders)
        try:
            spec = SynthSpec(n=args.n if args.n is not None else 40000,
                             d=args.d if args.d is not None else 20,
                             orders=tuple(orders), mix=tuple(mix), seed=args.seed)
        except InvalidInput as exc:
            raise UsageError(f"--mix/--orders: {exc}") from None
        data, scores = generate_semisynth(spec), None

    write_csv(data, run.output("data.csv"))
    save_schema(Schema(), run.output("schema.json"))
    if scores is not None:
        write_scores_csv(scores.scores, run.output("scores.csv"))
    if fractions:
        names = ("train", "audit", "test")[:len(fractions)] if len(fractions) <= 3 else \
            [f"part{i}" for i in range(len(fractions))]
        for name, idx in zip(names, split_indices(data.n, fractions, args.seed)):
            write_csv(data.subset(idx), run.output(f"{name}.csv"))
            if scores is not None:
                write_scores_csv(scores.scores[idx], run.output(f"{name}_scores.csv"))
    summary = {"n": data.n, "d": data.d, "groups": {k: dict(zip(*np.unique(v, return_counts=True)))
                                                    for k, v in data.groups.items()},
               "note": data.note}
    summary["groups"] = {k: {str(a): int(b) for a, b in v.items()} for k, v in summary["groups"].items()}
    run.show(f"wrote {data.n} rows x {data.d} features to {run.out_dir / 'data.csv'}", summary)
    run.finish()
    return 0


# --------------------------------------------------------------------------
# split
# --------------------------------------------------------------------------


def cmd_split(args) -> int:
    run = Run(args)
    data = _load_data(run, args.data, args.schema)
    fractions = _floats("--fractions", args.fractions)
    scores = read_scores_csv(run.input(args.scores)) if args.scores else None
    if scores is not None and scores.scores.shape[0] != data.n:
        raise InvalidInput(f"scores file has {scores.scores.shape[0]} rows, data has {data.n}")
    names = ["train", "audit", "test"] if len(fractions) == 3 else [f"part{i}" for i in range(len(fractions))]
    sizes = {}
    for name, idx in zip(names, split_indices(data.n, fractions, args.seed)):
        write_csv(data.subset(idx), run.output(f"{name}.csv"))
        if scores is not None:
            write_scores_csv(scores.scores[idx], run.output(f"{name}_scores.csv"))
        sizes[name] = int(idx.size)
    run.show(" ".join(f"{k}={v}" for k, v in sizes.items()), sizes)
    run.finish()
    return 0


# --------------------------------------------------------------------------
# train-f0 and baseline
# --------------------------------------------------------------------------


def _train_config(args, kind=None) -> TrainConfig:
    hidden = tuple(_ints("--hidden", args.hidden))
    try:
        return TrainConfig(kind=kind or args.kind, learning_rate=args.lr, epochs=args.epochs,
                           l2=args.l2, hidden=hidden, optimizer=args.optimizer, seed=args.seed)
    except InvalidInput as exc:
        raise UsageError(str(exc)) from None


def cmd_train_f0(args) -> int:
    run = Run(args)
    data = _load_data(run, args.data, args.schema)
    model = train_f0(data, _train_config(args))
    save_model(model, run.output(args.out))
    from .metrics import classification_error, cross_entropy
    from .model import clamp
    p = clamp(model.predict(data.X))
    info = {"train_error": classification_error(p, data.y), "train_xent": cross_entropy(p, data.y)}
    run.show(f"train error {100 * info['train_error']:.1f}%  xent {info['train_xent']:.4f}", info)
    run.finish()
    return 0


def cmd_baseline(args) -> int:
    run = Run(args)
    data = _load_data(run, args.data, args.schema)
    if args.kind == "rt":
        if not args.f0:
            raise UsageError("--f0 is required for the rt baseline")
        f0 = load_predictor(run.input(args.f0))
        kind = "logistic" if getattr(f0, "kind", "") == "linear" else "mlp2"
        model = retrain_baseline(f0, data, _train_config(args, kind))
    else:
        if not args.groups:
            raise UsageError("--groups is required for the ss baseline")
        model = subgroup_specific_baseline(data, args.groups.split(","),
                                           _train_config(args, args.model_kind))
    save_model(model, run.output(args.out))
    run.show(f"wrote {args.kind} baseline to {run.out_dir / args.out}", {"kind": args.kind})
    run.finish()
    return 0


# --------------------------------------------------------------------------
# boost
# --------------------------------------------------------------------------


def _base_predictor(run: Run, args):
    if bool(args.scores) == bool(args.model):
        raise UsageError("give exactly one of --scores or --model")
    if args.scores:
        return read_scores_csv(run.input(args.scores))
    return load_predictor(run.input(args.model))


def _load_sets(run: Run, path) -> tuple:
    if not path:
        return ()
    try:
        raw = json.loads(Path(run.input(path)).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed --sets JSON: {exc.msg}", f"{path}:{exc.lineno}") from None
    if not isinstance(raw, list):
        raise FormatError("--sets must hold a JSON list", str(path))
    sets = tuple(hypothesis_from_dict(d, f"sets[{i}]") for i, d in enumerate(raw))
    if not all(isinstance(s, SetHypothesis) for s in sets):
        raise FormatError("--sets must hold set hypotheses only", str(path))
    return sets


def cmd_boost(args) -> int:
    run = Run(args)
    data = _load_data(run, args.data, args.schema)
    base = _base_predictor(run, args)
    try:
        auditor = AuditorConfig(kind=args.auditor, ridge_lambda=args.ridge_lambda,
                                tree_max_depth=args.tree_depth,
                                tree_min_samples_leaf=args.tree_min_leaf,
                                smoothing_threshold=args.smoothing, L=args.L, B=args.bound,
                                sets=_load_sets(run, args.sets), seed=args.seed)
        config = BoostConfig(alpha=args.alpha, eta=args.eta, max_iterations=args.max_iter,
                             batch_strategy="single" if args.single_batch else "folds",
                             folds=args.folds, auditor=auditor,
                             restrict_correlation=not args.unrestricted, seed=args.seed)
    except InvalidInput as exc:
        raise UsageError(str(exc)) from None
    model, trace = run_boost(base, data, config)
    save_model(model, run.output(args.out))
    run.write_text(args.trace, trace.to_jsonl())

    lines = [f"{'t':>4} {'S*':>4} {'correlation':>12} {'xent_before':>12} {'xent_after':>12}"]
    for r in trace.records:
        lines.append(f"{r['t']:>4} {r['partition']:>4} {r['correlation']:>12.6f} "
                     f"{r['xent_before']:>12.6f} {r['xent_after']:>12.6f}")
    top = max(trace.final_correlations.values(), default=0.0)
    if trace.reason == "converged":
        lines.append(f"converged at t={trace.final_t} (max correlation {top:.6f} <= alpha {args.alpha})")
    else:
        lines.append(f"stopped after {trace.iterations} updates (max-iterations); "
                     f"max correlation {top:.6f}")
    summary = trace.summary()
    run.write_text("boost.txt", "\n".join(lines))
    run.show("\n".join(lines), summary)
    run.finish()
    return 0


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def _model_specs(text_list) -> list[tuple[str, str]]:
    specs = []
    for chunk in text_list:
        for item in chunk.split(","):
            if not item.strip():
                continue
            if "=" not in item:
                raise UsageError(f"--models: expected name=path, got {item!r}")
            name, path = item.split("=", 1)
            specs.append((name.strip(), path.strip()))
    if not specs:
        raise UsageError("--models: no models given")
    return specs


def cmd_evaluate(args) -> int:
    run = Run(args)
    data = _load_data(run, args.data, args.schema)
    columns = [c for c in (args.groups or "").split(",") if c]
    unknown = [c for c in columns if c not in data.groups]
    if unknown:
        raise UsageError(f"--groups: unknown group column(s) {unknown}; "
                         f"available: {sorted(data.groups)}")
    scores, sensitive = {}, {}
    for name, path in _model_specs(args.models):
        model = load_predictor(run.input(path))
        p = model.predict(data.X, data.groups)
        if not isinstance(model, ScoresPredictor):
            p = clamp(p)
        scores[name] = p
        sensitive[name] = isinstance(model, GroupedPredictor)
    specs = group_specs(data.groups, columns) if columns else []
    report = metrics_report(data.y, data.groups, specs, scores, alpha=args.alpha,
                            requires_sensitive=sensitive)
    table = format_table(report)
    run.write_json(args.out, report)
    run.write_text(Path(args.out).with_suffix(".txt").name, table)
    run.show(table, report if args.format != "table" else None)
    run.finish()
    return 0


# --------------------------------------------------------------------------
# diagnose
# --------------------------------------------------------------------------


def cmd_diagnose(args) -> int:
    run = Run(args)
    data = _load_data(run, args.data, args.schema)
    model = load_predictor(run.input(args.model))
    if not isinstance(model, BoostedModel):
        raise UsageError("--model must be a boosted model file")
    T = len(model.updates)
    if not 1 <= args.round <= T:
        raise UsageError(f"--round must lie in 1..{T}, got {args.round}")
    h = model.round_effect(data.X, args.round - 1, data.groups)
    mag = np.abs(h)
    k = min(args.top, data.n)
    order = np.argsort(-mag, kind="stable")
    rows_top = order[:k]
    rows_low = np.argsort(mag, kind="stable")[:k]

    def describe(idx):
        out = []
        for i in idx:
            out.append({"row": int(i), "h": float(h[i]), "label": int(data.y[i]),
                        "groups": {g: str(v[i]) for g, v in sorted(data.groups.items())}})
        return out

    result = {"round": args.round, "partition": model.updates[args.round - 1].partition.value,
              "top": describe(rows_top), "bottom": describe(rows_low)}
    lines = [f"round {args.round} ({result['partition']}): largest |h|"]
    for block, title in ((result["top"], None), (result["bottom"], "smallest |h|")):
        if title:
            lines.append(title)
        for r in block:
            g = " ".join(f"{k}={v}" for k, v in r["groups"].items())
            lines.append(f"  row {r['row']:>6}  h={r['h']:>+9.4f}  y={r['label']}  {g}")
    run.write_json(args.out, result)
    run.write_text(Path(args.out).with_suffix(".txt").name, "\n".join(lines))
    run.show("\n".join(lines), result if args.format == "json" else None)
    run.finish()
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiaccuracy", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--format", choices=("json", "table", "both"), default="table")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--d", type=int, default=None)
    p.add_argument("--mix", default="0.150,0.197,0.246,0.407")
    p.add_argument("--orders", default="1,4,2,6")
    p.add_argument("--split", default=None, help="e.g. 0.8,0.1,0.1 -> train/audit/test CSVs")
    p.add_argument("--adversarial", action="store_true", help="planted-bias fixture + scores.csv")
    p.add_argument("--group-mass", type=float, default=0.1)
    p.add_argument("--flip-rate", type=float, default=1.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", parents=[common], help="seeded train/audit/test split")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--scores", default=None, help="row-aligned scores file to split alongside")
    p.add_argument("--fractions", default="0.6,0.2,0.2")
    p.set_defaults(func=cmd_split)

    def training_flags(q):
        q.add_argument("--lr", type=float, default=0.01)
        q.add_argument("--epochs", type=int, default=600)
        q.add_argument("--l2", type=float, default=1e-4)
        q.add_argument("--hidden", default="32,16")
        q.add_argument("--optimizer", choices=("adam", "gd"), default="adam")

    p = sub.add_parser("train-f0", parents=[common], help="train the initial model")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--kind", choices=("logistic", "mlp2"), default="mlp2")
    training_flags(p)
    p.add_argument("--out", default="f0.json")
    p.set_defaults(func=cmd_train_f0)

    p = sub.add_parser("boost", parents=[common], help="run Multiaccuracy Boost")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--scores", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--eta", type=float, default=None, help="default alpha/4")
    p.add_argument("--auditor", choices=("ridge", "tree", "gradient", "set-collection"),
                   default="ridge")
    p.add_argument("--ridge-lambda", type=float, default=1.0)
    p.add_argument("--tree-depth", type=int, default=5)
    p.add_argument("--tree-min-leaf", type=int, default=1)
    p.add_argument("--smoothing", type=float, default=10.0)
    p.add_argument("--L", type=float, default=8.0)
    p.add_argument("--bound", type=float, default=None)
    p.add_argument("--sets", default=None, help="JSON list of set hypotheses")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--folds", type=int, default=None)
    p.add_argument("--single-batch", action="store_true")
    p.add_argument("--unrestricted", action="store_true",
                   help="audit correlation over the whole batch instead of the partition")
    p.add_argument("--out", default="model.json")
    p.add_argument("--trace", default="trace.jsonl")
    p.set_defaults(func=cmd_boost)

    p = sub.add_parser("evaluate", parents=[common], help="per-group error report")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--models", action="append", required=True, help="name=path[,name=path]")
    p.add_argument("--groups", default=None, help="comma-separated group columns")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default="report.json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", parents=[common], help="rank rows by auditor effect |h_t(x)|")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--round", type=int, default=1, help="1-based update index")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", default="diagnose.json")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("baseline", parents=[common], help="train RT or SS baselines")
    p.add_argument("--kind", choices=("rt", "ss"), required=True)
    p.add_argument("--data", required=True, help="audit CSV")
    p.add_argument("--schema", default=None)
    p.add_argument("--f0", default=None)
    p.add_argument("--groups", default=None)
    p.add_argument("--model-kind", choices=("logistic", "mlp2"), default="mlp2",
                   help="model class for ss (rt keeps the class of --f0)")
    training_flags(p)
    p.add_argument("--out", default="baseline.json")
    p.set_defaults(func=cmd_baseline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (MultiaccuracyError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
