"""Command line: ``safemil <command> --config ... --out ...``.

Exit codes: 0 success, 1 contract or file error, 2 configuration or data
generation error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .cmdp import Policy
from .config import ExperimentConfig, load_config
from .errors import ConfigError, ContractError, GenerationError, ParseError, TrainingError
from .evaluation import EvalReport, rows_to_csv
from .experiment import (
    StageError,
    Workspace,
    build_report,
    evaluate_seed,
    exact_metrics,
    failure_record,
    load_policy,
    make_report,
    run_dir,
    run_suite,
    run_sweep,
    save_method,
    train_method,
)
from .nn import load_checkpoint
from .policy import METHODS

log = logging.getLogger("safemil")

EXIT_OK, EXIT_CONTRACT, EXIT_CONFIG, EXIT_TRAINING = 0, 1, 2, 3


def _methods(args, config: ExperimentConfig) -> list:
    if args.method in (None, "all"):
        return list(config.methods)
    if args.method not in METHODS:
        raise ConfigError(f"unknown method {args.method!r}; expected one of {METHODS} or 'all'")
    return [args.method]


def _seeds(args, config: ExperimentConfig) -> list:
    return list(config.eval.seeds) if args.seed is None else [args.seed]


def _workspace(args) -> Workspace:
    config = load_config(args.config)
    out = args.out or Path("runs") / config.env.kind
    return Workspace(config, out)


def cmd_gen_data(args) -> int:
    ws = _workspace(args)
    for seed in _seeds(args, ws.config):
        summary = ws.data(seed).summary
        print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_solve(args) -> int:
    ws = _workspace(args)
    print(json.dumps({k: v for k, v in ws.reference.to_dict().items() if k != "policy"},
                     sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    ws = _workspace(args)
    failed = False
    for method in _methods(args, ws.config):
        for seed in _seeds(args, ws.config):
            data = ws.data(seed)
            try:
                result = train_method(ws.config, data, method, seed, ws.costs)
            except StageError as exc:
                failure_record(ws.out, ws.config, ws.env, method, seed, exc)
                print(f"{method} seed {seed}: {exc}", file=sys.stderr)
                failed = True
                continue
            save_method(ws.out, ws.config, ws.env, result, data.summary["provenance"])
            print(f"{method} seed {seed}: {run_dir(ws.out, method, seed)}")
    return EXIT_TRAINING if failed else EXIT_OK


def cmd_eval(args) -> int:
    ws = _workspace(args)
    ref = ws.reference
    methods = _methods(args, ws.config)
    if args.checkpoint and (len(methods) != 1 or args.seed is None):
        raise ConfigError("--checkpoint needs a single --method and --seed")
    for method in methods:
        for seed in _seeds(args, ws.config):
            if args.checkpoint:
                model, _ = load_checkpoint(args.checkpoint)
                policy = Policy("mlp", model=model)
                policy.table(ws.env)
            else:
                policy = load_policy(ws.out, method, seed, ws.env)
            report = make_report(ws.config, method, ws.env.name,
                                 [evaluate_seed(ws.env, ws.config, policy, seed)], ref.baselines)
            d = run_dir(ws.out, method, seed)
            d.mkdir(parents=True, exist_ok=True)
            (d / "eval.json").write_text(report.to_json() + "\n")
            exact = exact_metrics(ws.env, policy, ref)
            (d / "exact.json").write_text(json.dumps(exact, sort_keys=True) + "\n")
            sys.stdout.write(report.to_csv(header=False))
    write_summary(ws.out, ws.config)
    return EXIT_OK


def write_summary(out, config: ExperimentConfig) -> Path:
    """summary.csv from every evaluated (method, seed) in config order."""
    rows = []
    for method in config.methods:
        for seed in config.eval.seeds:
            path = run_dir(out, method, seed) / "eval.json"
            if path.exists():
                rows.extend(EvalReport.from_dict(json.loads(path.read_text())).rows())
    path = Path(out) / "summary.csv"
    path.write_text(rows_to_csv(rows))
    return path


def cmd_run(args) -> int:
    ws = _workspace(args)
    seeds = None if args.seed is None else [args.seed]
    result = run_suite(ws.config, methods=_methods(args, ws.config), seeds=seeds, workspace=ws)
    build_report(ws.out)
    sys.stdout.write(result.summary_csv())
    failed = any(r.status != "ok" for r in result.records)
    return EXIT_TRAINING if failed else EXIT_OK


def cmd_sweep(args) -> int:
    ws = _workspace(args)
    seeds = None if args.seed is None else [args.seed]
    result = run_sweep(ws.config, workspace=ws, seeds=seeds)
    sys.stdout.write(result.summary_csv())
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else Path("runs") / load_config(args.config).env.kind
    if not out.is_dir():
        raise ConfigError(f"run directory {out} does not exist")
    report = build_report(out)
    for env, rows in report["tables"].items():
        print(f"# {env}")
        for row in rows:
            print(f"{row['method']:20s} return {row['return']:8.3f} "
                  f"[{row['return_lo']:.3f}, {row['return_hi']:.3f}]  "
                  f"cost {row['cost']:7.3f} [{row['cost_lo']:.3f}, {row['cost_hi']:.3f}]  "
                  f"cvar20 {row['cvar20']:7.3f}")
    for item in report["missing"]:
        print(f"missing run: {item}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate D^N / D^U datasets and manifests"),
    "solve": (cmd_solve, "solve the constrained reference and baselines"),
    "train": (cmd_train, "train cost models and policies"),
    "eval": (cmd_eval, "evaluate trained policies"),
    "run": (cmd_run, "train, evaluate and report every method and seed"),
    "sweep": (cmd_sweep, "bag-size and segment-length sensitivity"),
    "report": (cmd_report, "summary tables with bootstrap intervals"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safemil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default="speed_chain",
                       help="TOML file or preset name (speed_chain, hazard_grid)")
        p.add_argument("--out", type=Path, default=None, help="run directory")
        if name in ("gen-data", "train", "eval", "run", "sweep"):
            p.add_argument("--seed", type=int, default=None, help="single seed (default: config seeds)")
        if name in ("train", "eval", "run"):
            p.add_argument("--method", default=None, help="method name or 'all'")
        if name == "eval":
            p.add_argument("--checkpoint", type=Path, default=None, help="policy checkpoint file")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        return handler(args)
    except (ConfigError, GenerationError) as exc:
        print(f"error: {exc} (config: {args.config})", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, StageError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ContractError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
