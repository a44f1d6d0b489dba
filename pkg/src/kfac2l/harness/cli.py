"""Command line front end.

Exit codes: 0 when every requested run completed, 1 when a run diverged or
no grid cell survived (or a self check failed), 2 for a bad config or input.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from ..optim import METHODS, FULL_GRID
from . import config as cfgmod
from .data import DatasetError
from .plot import EmptyLogSet, render_plot
from .runner import run_experiment

EXIT_OK, EXIT_RUN_FAILURE, EXIT_BAD_CONFIG = 0, 1, 2


def _add_run_args(p: argparse.ArgumentParser):
    p.add_argument("config", help="path to a TOML config, or the name of a shipped preset")
    p.add_argument("--seed", type=int, help="override the config's root seed")
    p.add_argument("--epochs", type=int, help="override the epoch budget")
    p.add_argument("--device-threads", type=int, default=1, help="runs dispatched concurrently (default 1)")
    p.add_argument("--output-dir", help="directory for CSV logs (default: the config's output_dir)")
    p.add_argument("--methods", help="comma-separated subset of methods to run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kfac2l", description="Two-level KFAC optimizer experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="train every configured method and write CSV logs")
    _add_run_args(run)
    grid = sub.add_parser("grid", help="grid-search lr and damping per method, then log the best run")
    _add_run_args(grid)
    grid.add_argument("--full-grid", action="store_true", help="search 1e-4 ... 1e4 for both lr and damping")

    plot = sub.add_parser("plot", help="render run CSVs to an SVG")
    plot.add_argument("csv", nargs="+")
    plot.add_argument("-o", "--output", required=True)
    plot.add_argument("--y", choices=("loss", "gap"), default="loss",
                      help="loss per epoch (log scale) or gap per step (linear)")

    st = sub.add_parser("selftest", help="run the oracle-equivalence checks")
    st.add_argument("--cases", type=int, default=20)
    st.add_argument("--seed", type=int, default=0)

    sub.add_parser("presets", help="list shipped presets")
    return parser


def _load_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config)
    methods = None
    if args.methods:
        methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
        unknown = [m for m in methods if m not in METHODS]
        if unknown:
            raise cfgmod.ConfigError(f"unknown methods: {', '.join(unknown)}")
    if args.epochs is not None and args.epochs < 0:
        raise cfgmod.ConfigError("--epochs must be >= 0")
    cfg = cfgmod.with_overrides(cfg, seed=args.seed, epochs=args.epochs, output_dir=args.output_dir,
                                methods=methods)
    if getattr(args, "full_grid", False):
        cfg = cfgmod.with_overrides(cfg, grid=cfgmod.GridSpec(FULL_GRID, FULL_GRID))
    return cfg


def _experiment(args, search: Optional[bool]) -> int:
    try:
        cfg = _load_config(args)
        results = run_experiment(cfg, threads=args.device_threads, search=search)
    except (cfgmod.ConfigError, DatasetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    failed = False
    for res in results:
        if res.ok:
            print(f"{res.method}: final loss {res.record.final_loss:.6g} "
                  f"(lr={res.config.lr:g}, damping={res.config.damping:g}) -> {res.log_path}")
        else:
            failed = True
            print(f"{res.method}: FAILED, {res.error}", file=sys.stderr)
    return EXIT_RUN_FAILURE if failed else EXIT_OK


def _plot(args) -> int:
    try:
        render_plot(args.csv, args.output, kind=args.y)
    except EmptyLogSet as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILURE
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: cannot read logs: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    print(args.output)
    return EXIT_OK


def _selftest(args) -> int:
    from ..checks import run_all

    results = run_all(n=args.cases, seed=args.seed)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUN_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "run":
        return _experiment(args, search=None)
    if args.verb == "grid":
        return _experiment(args, search=True)
    if args.verb == "plot":
        return _plot(args)
    if args.verb == "selftest":
        return _selftest(args)
    for name in cfgmod.preset_names():
        print(name)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
