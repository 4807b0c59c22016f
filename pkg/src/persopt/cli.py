"""Command-line entry point.

    persopt run CONFIG [--seed N] [--out-dir DIR] [--threads K] [--format csv|json]
    persopt baselines FUNCTION_ID [--out-dir DIR] [--format csv|json]
    persopt trace CONFIG [--seed N] [--out-dir DIR] [--threads K]
    persopt validate CONFIG

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import __version__, bench, robust, testbed

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, seed=True, out=True, threads=True, fmt=True) -> None:
    if seed:
        p.add_argument("--seed", type=int, help="base seed; overrides the config's seed and seeds")
    if out:
        p.add_argument("--out-dir", help="output directory (default: the config's output entry)")
    if threads:
        p.add_argument("--threads", type=int, default=1, help="worker processes for independent replicates")
    if fmt:
        p.add_argument("--format", choices=("csv", "json"), default="csv")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="persopt", description="Personalized optimization experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run an experiment and write the cost table")
    p.add_argument("config")
    _common(p)

    p = sub.add_parser("baselines", help="constant robust decisions of a test function")
    p.add_argument("function_id")
    p.add_argument("--grid-points", type=int, default=101, help="quadrature cells per environmental dimension")
    _common(p, seed=True, threads=False)

    p = sub.add_parser("trace", help="write per-iteration design points (no cost evaluation)")
    p.add_argument("config")
    _common(p, fmt=False)

    p = sub.add_parser("validate", help="check a config file and exit")
    p.add_argument("config")
    return parser


def _load(args) -> bench.ExperimentConfig:
    cfg = bench.ExperimentConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _cmd_run(args) -> int:
    cfg = _load(args)
    report = bench.run_experiment(cfg, threads=args.threads)
    out = args.out_dir or cfg.output
    for path in bench.emit_report(report, out, args.format, cfg.file_prefix):
        print(path)
    if report.metadata["failures"]:
        for msg in report.metadata["failures"]:
            print(f"failed: {msg}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_trace(args) -> int:
    cfg = _load(args)
    report = bench.run_experiment(cfg, threads=args.threads, costs=False)
    for path in bench.emit_traces(report, args.out_dir or cfg.output, cfg.file_prefix):
        print(path)
    return EXIT_RUNTIME if report.metadata["failures"] else EXIT_OK


def _cmd_baselines(args) -> int:
    try:
        f = testbed.get(args.function_id)
    except KeyError as exc:
        raise bench.ConfigError(str(exc.args[0])) from None
    try:
        grid = robust.CostGrid(points_per_dim=args.grid_points, seed=args.seed or 0)
    except ValueError as exc:
        raise bench.ConfigError(str(exc)) from None
    sol = robust.robust_baselines(f, grid, seed=args.seed or 0)
    rows = [
        bench.CostRow(f.id, name, None, None, None, None, bench._sig(c.expected), bench._sig(c.maximum))
        for name, (_, c) in sol.items()
    ]
    if args.format == "csv":
        text = bench.format_csv(rows)
    else:
        text = json.dumps(
            {name: {"s": [float(v) for v in u.s], "ce": c.expected, "cm": c.maximum} for name, (u, c) in sol.items()},
            indent=2,
        ) + "\n"
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        path = os.path.join(args.out_dir, f"{f.id}.baselines.{args.format}")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        print(path)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = bench.ExperimentConfig.load(args.config)
    tasks = len(cfg.strategies) * cfg.replicates
    print(
        f"ok: {cfg.function}, {tasks} run(s) of {cfg.iterations} iterations from n0={cfg.initial_size}, "
        f"{tasks * cfg.iterations + 2} report rows"
    )
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "trace": _cmd_trace, "baselines": _cmd_baselines, "validate": _cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) is not None and getattr(args, "threads", 1) < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except bench.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything else is a runtime failure
        logging.getLogger(__name__).debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
