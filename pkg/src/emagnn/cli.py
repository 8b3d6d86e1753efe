"""Command-line entry point: ``emagnn <subcommand> [flags]``.

Every subcommand writes only under ``--out`` and records its resolved
configuration in ``run_manifest.json``.  Passing that manifest back through
``--config`` replays the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import (SyntheticSpec, cohort_kind, generate_raw, generate_synthetic, load_cohort, load_raw_cohort,
                   preprocess, save_cohort, save_raw_cohort, split_sequential, train_test_windows)
from .experiments import ExperimentPlan, derive_seed, run_experiment, write_report
from .graphs import STATIC_METRICS, Graph, build_graph, build_random, load_graph, normalize, save_graph
from .models import FAMILIES, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, evaluate, make_record, train, write_records

MANIFEST = "run_manifest.json"
log = logging.getLogger("emagnn")


class UsageError(Exception):
    """Bad flag value discovered after parsing (e.g. from a config file)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one line on stderr, exit 2
        self.exit(2, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- flag types
def _gdt(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {value}")
    return value


def _unit(text: str) -> float:
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1), got {value}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {value}")
    return value


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {value}")
    return value


def _choice(options: Sequence[str]):
    def parse(text: str) -> str:
        value = str(text).upper()
        if value not in options:
            raise argparse.ArgumentTypeError(f"invalid choice {text!r} (choose from {', '.join(options)})")
        return value
    parse.__name__ = "choice"
    return parse


# ------------------------------------------------------------------- parser
def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--config", help="JSON file of flag values; explicit flags take precedence")
    p.add_argument("--seed", type=int, default=0, help="root seed")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_synthetic(p: argparse.ArgumentParser) -> None:
    d = SyntheticSpec()
    p.add_argument("--n", type=_positive_int, default=d.n_individuals, help="synthetic individuals")
    p.add_argument("--variables", type=_positive_int, default=d.n_variables, help="synthetic variables")
    p.add_argument("--timepoints", type=_positive_int, default=d.n_timepoints, help="synthetic timepoints")
    p.add_argument("--density", type=_gdt, default=d.density, help="planted graph density")
    p.add_argument("--noise-std", type=_nonneg_float, default=d.noise_std, help="innovation noise std")
    p.add_argument("--missing-rate", type=_unit, default=d.missing_rate, help="fraction of unanswered prompts")


def _add_model(p: argparse.ArgumentParser) -> None:
    m, t = ModelConfig(), TrainConfig()
    p.add_argument("--hidden", type=_positive_int, default=m.hidden, help="hidden units")
    p.add_argument("--dropout", type=_unit, default=t.dropout, help="dropout rate")
    p.add_argument("--epochs", type=_positive_int, default=t.epochs, help="training epochs")
    p.add_argument("--lr", type=_nonneg_float, default=t.lr, help="Adam learning rate")
    p.add_argument("--clip-norm", type=_nonneg_float, default=t.clip_norm,
                   help="gradient norm clip; 0 disables clipping")
    p.add_argument("--train-fraction", type=_fraction, default=t.train_fraction, help="leading share used for training")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except for flags whose default means "unset"."""

    def _get_help_string(self, action):
        if action.default is None or isinstance(action.default, bool):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="emagnn", description="GNN forecasting for EMA time series.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"emagnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic cohort with planted graphs", formatter_class=fmt)
    _add_common(p)
    _add_synthetic(p)

    p = sub.add_parser("graph", help="build one graph per individual", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--in", dest="input", help="cohort CSV (required)")
    p.add_argument("--metric", type=_choice(STATIC_METRICS + ("RAND",)), default="CORR", help="similarity metric")
    p.add_argument("--gdt", type=_gdt, default=0.2, help="graph density threshold")
    p.add_argument("--k", type=_positive_int, default=None, help="neighbours for KNN (default: from gdt)")
    p.add_argument("--train-fraction", type=_fraction, default=0.7, help="graphs use this leading share only")

    p = sub.add_parser("train", help="train one model per individual", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--in", dest="input", help="cohort CSV (required)")
    p.add_argument("--individual", default=None, help="train only this individual")
    p.add_argument("--family", type=_choice(FAMILIES), default="RGCN_ATT", help="model family")
    p.add_argument("--metric", type=_choice(STATIC_METRICS + ("RAND",)), default="CORR",
                   help="graph metric, ignored with --graph or for LSTM")
    p.add_argument("--graph", default=None, help="graph CSV, or a directory of <individual_id>.csv files")
    p.add_argument("--gdt", type=_gdt, default=0.2, help="graph density threshold")
    p.add_argument("--seq-len", type=_positive_int, default=5, help="input window length")
    _add_model(p)

    p = sub.add_parser("experiment", help="run experiment A, B or C", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--which", type=_choice(("A", "B", "C")), help="experiment (required)")
    p.add_argument("--in", dest="input", default=None, help="cohort CSV; a synthetic cohort when omitted")
    _add_synthetic(p)
    _add_model(p)
    p.add_argument("--gdt", type=_gdt, nargs="+", default=None,
                   help="density thresholds; 0.2 for A and C, 0.2 0.4 1.0 for B when omitted")
    p.add_argument("--seq-len", type=_positive_int, nargs="+", default=None,
                   help="window lengths; 1 2 5 for A, 5 otherwise when omitted")
    p.add_argument("--random-repeats", type=_positive_int, default=5, help="random graphs per RAND cell")
    p.add_argument("--workers", type=_positive_int, default=1, help="parallel worker processes")

    p = sub.add_parser("inspect", help="summarize a cohort, graph or checkpoint", formatter_class=fmt)
    p.add_argument("path", help="cohort CSV, graph CSV or checkpoint JSON")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


# ----------------------------------------------------------- config files
_NOT_CONFIGURABLE = {"command", "config", "out", "verbose"}
# flags that may come from --config instead of the command line
_REQUIRED = {"graph": [("input", "--in")], "train": [("input", "--in")], "experiment": [("which", "--which")]}


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _load_config(path: str, command: str, sub: argparse.ArgumentParser) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise UsageError(f"argument --config: cannot read {path}: {err}") from None
    if not isinstance(data, dict):
        raise UsageError("argument --config: expected a JSON object")
    if "config" in data and "command" in data:  # a run manifest
        if data["command"] != command:
            raise UsageError(f"argument --config: manifest is for {data['command']!r}, not {command!r}")
        data = data["config"]
    actions = {a.dest: a for a in sub._actions}
    resolved = {}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest in _NOT_CONFIGURABLE:
            continue
        if dest not in actions:
            raise UsageError(f"argument --config: unknown key {key!r}")
        action = actions[dest]
        if value is not None and action.type is not None:
            flag = action.option_strings[-1] if action.option_strings else dest
            try:
                if isinstance(value, list):
                    value = [action.type(str(v)) for v in value]
                else:
                    value = action.type(str(value))
            except (argparse.ArgumentTypeError, ValueError) as err:
                raise UsageError(f"argument {flag}: {err}") from None
        resolved[dest] = value
    return resolved


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    """Parse flags; a ``--config`` file fills in whatever the flags leave unset."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = _subparser(parser, args.command)
        defaults = _load_config(args.config, args.command, sub)
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    for dest, flag in _REQUIRED.get(args.command, []):
        if getattr(args, dest) is None:
            raise UsageError(f"argument {flag} is required")
    return args


def _resolved(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_CONFIGURABLE}


def _write_manifest(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    manifest = {"command": args.command, "version": __version__, "config": _resolved(args)}
    if extra:
        manifest.update(extra)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- helpers
def _load_series(path: str):
    if cohort_kind(path) == "raw":
        series, _ = preprocess(load_raw_cohort(path))
        return series
    return load_cohort(path)


def _synthetic_spec(args) -> SyntheticSpec:
    return SyntheticSpec(n_individuals=args.n, n_variables=args.variables, n_timepoints=args.timepoints,
                         density=args.density, noise_std=args.noise_std, missing_rate=args.missing_rate,
                         seed=args.seed)


def _clip(args) -> float | None:
    return args.clip_norm if args.clip_norm else None


# --------------------------------------------------------------- commands
def cmd_generate(args, out: Path) -> None:
    spec = _synthetic_spec(args)
    raw, _ = generate_raw(spec)
    save_raw_cohort(raw, out / "raw_cohort.csv")
    series, graphs, provenance = generate_synthetic(spec)
    save_cohort(series, out / "cohort.csv", provenance)
    (out / "planted").mkdir(exist_ok=True)
    for s, g in zip(series, graphs):
        save_graph(g, out / "planted" / f"{s.individual_id}.csv")
    print(f"wrote {len(series)} individuals x {series[0].V} variables to {out / 'cohort.csv'}")


def _graph_for(args, series) -> Graph:
    if args.metric == "RAND":
        seed = derive_seed(args.seed, "RAND", series.individual_id, args.gdt, 0)
        return build_random(series.V, args.gdt, seed, node_names=series.variable_names)
    train_part = split_sequential(series, args.train_fraction)[0]
    return build_graph(args.metric, train_part, args.gdt, k=getattr(args, "k", None))


def cmd_graph(args, out: Path) -> None:
    cohort = _load_series(args.input)
    for s in cohort:
        save_graph(_graph_for(args, s), out / f"{s.individual_id}.csv")
    print(f"wrote {len(cohort)} {args.metric} graphs (gdt={args.gdt}) to {out}")


def _given_graph(path: str, individual_id: str) -> Graph:
    p = Path(path)
    return load_graph(p / f"{individual_id}.csv" if p.is_dir() else p)


def cmd_train(args, out: Path) -> None:
    cohort = _load_series(args.input)
    if args.individual is not None:
        cohort = [s for s in cohort if s.individual_id == args.individual]
        if not cohort:
            raise ValueError(f"individual {args.individual!r} not found in {args.input}")
    (out / "checkpoints").mkdir(exist_ok=True)
    records = []
    for s in cohort:
        seed = derive_seed(args.seed, s.individual_id, args.family, args.seq_len, 0)
        tcfg = TrainConfig(epochs=args.epochs, lr=args.lr, dropout=args.dropout, seq_len=args.seq_len, seed=seed,
                           clip_norm=_clip(args), train_fraction=args.train_fraction)
        mcfg = ModelConfig(family=args.family, hidden=args.hidden, dropout=args.dropout, seq_len=args.seq_len)
        graph, metric = None, ""
        if args.family != "LSTM":
            graph = _given_graph(args.graph, s.individual_id) if args.graph else _graph_for(args, s)
            metric = graph.metric
        train_w, test_w = train_test_windows(s, args.seq_len, args.train_fraction)
        model = build_model(mcfg, s.V, graph, seed=seed)
        curve = train(model, train_w, tcfg)
        score = evaluate(model, test_w)
        records.append(make_record(s.individual_id, args.family, metric, args.gdt, tcfg, score, curve))
        save_checkpoint(model, out / "checkpoints" / s.individual_id)
        print(f"{s.individual_id} {args.family} test_mse={score:.4f}")
    write_records(records, out / "records.csv", out / "curves.csv")


def cmd_experiment(args, out: Path) -> None:
    if args.input:
        cohort = _load_series(args.input)
    else:
        cohort = generate_synthetic(_synthetic_spec(args))[0]
    axes = {}
    if args.gdt is not None:
        axes["gdts"] = tuple(args.gdt)
    if args.seq_len is not None:
        axes["seq_lens"] = tuple(args.seq_len)
    plan = ExperimentPlan.default(args.which, seed=args.seed, epochs=args.epochs, lr=args.lr, dropout=args.dropout,
                                  hidden=args.hidden, clip_norm=_clip(args), train_fraction=args.train_fraction,
                                  n_random_repeats=args.random_repeats, workers=args.workers, **axes)
    report = run_experiment(cohort, plan)
    write_report(report, out)
    failed = sum(r.failed for r in report.records)
    print(f"experiment {plan.experiment}: {len(report.records)} runs, {failed} failed; reports in {out}")


def cmd_inspect(args) -> None:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    if "tensors" in meta:
        model = load_checkpoint(path)
        print(f"checkpoint {path.with_suffix('')}")
        print(f"  family     {model.config.family}")
        print(f"  variables  {model.V}")
        print(f"  parameters {model.n_params()}")
        print(f"  trained    {model.trained}")
        for name, p in model.params.items():
            print(f"    {name:<10} {tuple(p.shape)}")
    elif "metric" in meta:
        g = load_graph(path)
        ng = normalize(g, chebyshev_order=1)
        print(f"graph {path}")
        print(f"  metric     {g.metric}")
        print(f"  nodes      {g.V}")
        print(f"  edges      {g.n_edges()} (density {g.density():.3f})")
        print(f"  symmetric  {g.is_symmetric()}")
        print(f"  lambda_max {ng.lambda_max:.4f}")
    else:
        series = _load_series(str(path))
        lengths = [s.T for s in series]
        print(f"cohort {path} ({meta.get('kind', 'normalized')})")
        print(f"  individuals {len(series)}")
        print(f"  variables   {series[0].V if series else 0}")
        print(f"  timepoints  min {min(lengths)} / mean {np.mean(lengths):.1f} / max {max(lengths)}")
        for s in series[:10]:
            print(f"    {s.individual_id:<12} T={s.T}")
        if len(series) > 10:
            print(f"    ... {len(series) - 10} more")


COMMANDS = {"generate": cmd_generate, "graph": cmd_graph, "train": cmd_train, "experiment": cmd_experiment}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as err:
        print(f"emagnn: error: {err}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "inspect":
            cmd_inspect(args)
            return 0
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, out)
        _write_manifest(out, args)
    except Exception as err:
        print(f"emagnn: error: {type(err).__name__}: {str(err).splitlines()[0] if str(err) else ''}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
