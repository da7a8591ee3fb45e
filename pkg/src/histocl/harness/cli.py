"""Command-line interface.

Subcommands: ``synth`` (write a synthetic dataset folder), ``augment``
(apply the five-domain stain augmentation to a folder), ``run`` (execute an
experiment config), ``grid`` (hyperparameter grid search), ``report``
(regenerate CSV/SVG from a stored result.json). Exit codes: 0 success,
1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .. import stain
from ..data import load_folder, save_folder, synth_generate
from ..errors import ConfigError, HistoclError


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{message}\n{self.format_usage()}".rstrip())


def build_parser() -> _Parser:
    parser = _Parser(prog="histocl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset folder")
    p.add_argument("--out", required=True, help="output dataset folder")
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--side", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("augment",
                       help="stain-augment a dataset folder into 5 domains")
    p.add_argument("--in", dest="input", required=True, help="source dataset folder")
    p.add_argument("--out", required=True, help="augmented dataset folder")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--config", default=None,
                   help="optional run config supplying data.domains interval overrides")

    p = sub.add_parser("run", help="run an experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override output.dir")

    p = sub.add_parser("grid", help="grid search over a config")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", required=True, help="JSON file: dotted config path -> value list")
    p.add_argument("--out", default=None)

    p = sub.add_parser("report",
                       help="regenerate CSV/SVG from an existing result.json")
    p.add_argument("--result", required=True)
    p.add_argument("--out", default=None)
    return parser


def _cmd_synth(args) -> int:
    ds = synth_generate(args.classes, args.per_class, args.side, args.seed)
    manifest = save_folder(ds, args.out)
    print(f"wrote {len(ds)} patches in {args.classes} classes to {args.out}")
    print(f"manifest: {manifest}")
    return 0


def _cmd_augment(args) -> int:
    overrides = {}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.is_file():
            raise UsageError(f"config file not found: {cfg_path}")
        overrides = json.loads(cfg_path.read_text()).get("data", {}).get("domains", {})
    from .runner import domain_specs_from_config

    ds = load_folder(args.input)
    specs = domain_specs_from_config(overrides)
    out_ds = stain.build_augmented_dataset(ds, specs, args.seed)
    manifest = save_folder(out_ds, args.out)
    print(f"augmented {len(ds)} patches into domains 1..{len(specs)} at {args.out}")
    print(f"manifest: {manifest}")
    return 0


def _cmd_run(args) -> int:
    from .config import RunConfig
    from .results import write_results
    from .runner import run_experiment

    cfg = RunConfig.from_file(args.config)
    out_dir = args.out or cfg.output_dir
    result = run_experiment(cfg, out_dir=out_dir)
    paths = write_results(result, out_dir)
    for metric, agg in sorted(result.aggregates.items()):
        print(f"{metric}: {agg['mean']:.5f} +/- {agg['std']:.5f}")
    print(f"result: {paths['result']}")
    return 0


def _cmd_grid(args) -> int:
    from .config import RunConfig
    from .gridsearch import grid_search

    cfg = RunConfig.from_file(args.config)
    grid_path = Path(args.grid)
    if not grid_path.is_file():
        raise UsageError(f"grid file not found: {grid_path}")
    grid = json.loads(grid_path.read_text())
    out_dir = args.out or cfg.output_dir
    best, table = grid_search(cfg, grid, out_dir=out_dir)
    for row in table:
        print(f"val_acc {row['val_acc']:.5f}  {row['overrides']}")
    print(f"best: {table[0]['overrides']}")
    return 0


def _cmd_report(args) -> int:
    from .results import regenerate

    result_path = Path(args.result)
    if not result_path.is_file():
        raise UsageError(f"result file not found: {result_path}")
    paths = regenerate(result_path, args.out)
    for name, p in sorted(paths.items()):
        print(f"{name}: {p}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "augment": _cmd_augment,
    "run": _cmd_run,
    "grid": _cmd_grid,
    "report": _cmd_report,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except HistoclError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
