"""Command-line entry point: ``clshift {generate,train,adapt,evaluate,report,run}``.

Exit status: 0 on success, 2 on configuration/usage errors, 1 on runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from .errors import ConfigurationError
from .runner import (
    ExperimentConfig,
    OutputTree,
    StrategyConfig,
    adapt_source,
    load_datasets,
    make_workspace,
    run_experiment,
    score,
    train_source,
)

log = logging.getLogger("clshift")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _resolve_config_path(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("clshift") / "configs" / p.name
    if p.parent == Path(".") and bundled.is_file():
        return Path(str(bundled))
    raise ConfigurationError(f"config file not found: {path}")


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(_resolve_config_path(args.config)) if args.config else ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["master_seed"] = args.seed
    if getattr(args, "repetitions", None) is not None:
        overrides["repetitions"] = args.repetitions
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "jobs", None) is not None:
        overrides["jobs"] = args.jobs
    return replace(config, **overrides) if overrides else config


def _repetitions(config: ExperimentConfig, args) -> list[int]:
    if getattr(args, "repetition", None) is None:
        return list(range(1, config.repetitions + 1))
    if not 1 <= args.repetition <= config.repetitions:
        raise ConfigurationError(f"--repetition must lie in [1, {config.repetitions}]")
    return [args.repetition]


def _strategy_from_args(config: ExperimentConfig, args) -> StrategyConfig:
    try:
        base = config.strategy(args.strategy)
    except ConfigurationError:
        kind = args.strategy.lower()
        if kind not in ("jt", "ewc", "lwf"):
            raise
        base = StrategyConfig(kind.upper(), kind)
    changes = {}
    if args.lam is not None:
        changes["lam"] = args.lam
    if args.rho is not None:
        changes.update(rule="absolute", threshold=args.rho)
    if args.quantile is not None:
        changes.update(rule="quantile", threshold=args.quantile)
    if args.fraction is not None:
        changes["fraction"] = args.fraction
    if args.name:
        changes["name"] = args.name
    return replace(base, **changes)


def _write_config(config: ExperimentConfig, tree: OutputTree) -> None:
    (tree.root / "config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_generate(config, args) -> None:
    tree = OutputTree(args.out).ensure()
    _write_config(config, tree)
    a, b = load_datasets(config, tree)
    print(f"domain A: {len(a)} samples, domain B: {len(b)} samples -> {tree.root / 'data'}")


def cmd_train(config, args) -> None:
    tree = OutputTree(args.out).ensure()
    _write_config(config, tree)
    datasets = load_datasets(config, tree)
    for r in _repetitions(config, args):
        ws = make_workspace(config, r, datasets)
        train_source(config, r, tree, ws)
        print(f"repetition {r}: source model -> {tree.checkpoint(r, 'initial')}")


def cmd_adapt(config, args) -> None:
    from .nn import load_model

    strategy = _strategy_from_args(config, args)
    tree = OutputTree(args.out).ensure()
    datasets = load_datasets(config, tree)
    for r in _repetitions(config, args):
        path = tree.checkpoint(r, "initial")
        if not path.exists():
            raise ConfigurationError(f"no source checkpoint {path}; run `train` first")
        ws = make_workspace(config, r, datasets)
        adapt_source(config, strategy, r, tree, ws, load_model(path))
        print(f"repetition {r}: {strategy.name} -> {tree.checkpoint(r, strategy.slug)}")


def cmd_evaluate(config, args) -> None:
    """Re-score every checkpoint in the output tree on both test splits."""
    from .nn import load_model

    tree = OutputTree(args.out).ensure()
    datasets = load_datasets(config, tree)
    n = 0
    for r in _repetitions(config, args):
        ws = make_workspace(config, r, datasets)
        for slug in ["initial"] + [s.slug for s in config.strategies]:
            path = tree.checkpoint(r, slug)
            if not path.exists():
                continue
            model = load_model(path)
            score(model, ws.source.test).write_csv(tree.scores(r, slug, "A"))
            score(model, ws.target.test).write_csv(tree.scores(r, slug, "B"))
            n += 1
    print(f"scored {n} checkpoint(s) -> {tree.root / 'scores'}")


def cmd_report(config, args) -> None:
    from .report import evaluate_and_report, load_run_result

    summary = evaluate_and_report(load_run_result(config, args.out), args.out)
    print(f"report for {len(summary['repetitions'])} repetition(s) -> {Path(args.out) / 'report.md'}")


def cmd_run(config, args) -> None:
    if args.strategy:
        config = replace(config, strategies=tuple(config.strategy(s) for s in args.strategy))
    run_experiment(config, args.out)
    print(f"report -> {Path(args.out) / 'report.md'}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clshift", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, reps=True):
        p.add_argument("--config", help="JSON experiment config (default: built-in defaults)")
        p.add_argument("--out", default="results", help="output directory (default: results)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--repetitions", type=int, help="override the number of repetitions")
        p.add_argument("--epochs", type=int, help="override the epoch budget")
        if reps:
            p.add_argument("--repetition", type=int, help="only this repetition (1-based)")

    p = sub.add_parser("generate", help="write the two-domain benchmark to OUT/data")
    common(p, reps=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="stage 1: train source models on domain A")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="stage 2: adapt source models to domain B")
    common(p)
    p.add_argument("--strategy", required=True,
                   help="configured strategy name, or one of jt / ewc / lwf")
    p.add_argument("--lambda", dest="lam", type=float, help="EWC / LWF strength")
    p.add_argument("--rho", type=float, help="EWC absolute Fisher threshold")
    p.add_argument("--quantile", type=float, help="EWC Fisher threshold as a quantile in (0, 1)")
    p.add_argument("--fraction", type=float, help="JT fraction of source data")
    p.add_argument("--name", help="strategy name used for output files")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="score every checkpoint on both test splits")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="rebuild report.md / report.json from score files")
    common(p, reps=False)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run", help="full pipeline: generate, train, adapt, evaluate, report")
    common(p, reps=False)
    p.add_argument("--strategy", action="append", help="restrict to these strategies (repeatable)")
    p.add_argument("--jobs", type=int, help="repetitions run in parallel processes")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        config = load_config(args)
        args.func(config, args)
    except ConfigurationError as exc:
        print(f"clshift: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("failure", exc_info=True)
        print(f"clshift: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
