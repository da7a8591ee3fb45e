"""Hyperparameter grid search over the validation split."""

from __future__ import annotations

import itertools
import json
from copy import deepcopy
from pathlib import Path

from ..errors import ConfigError
from .config import RunConfig
from .runner import run_experiment


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = d
    for k in keys[:-1]:
        if k not in node or not isinstance(node[k], dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def grid_search(
    cfg: RunConfig,
    grid: dict[str, list],
    out_dir: str | Path | None = None,
) -> tuple[dict, list[dict]]:
    """Exhaustive search over the Cartesian product of grid values.

    Grid keys are dotted config paths (e.g. ``strategy.params.lam``).
    Enumeration is row-major over the keys as listed (the last key varies
    fastest). Every point trains with the config's first seed only and is
    scored by final mean validation accuracy; ties keep the earlier point.
    Returns (best config dict, ranked table) and writes ``grid.json``.
    """
    if not grid:
        raise ConfigError("grid must contain at least one hyperparameter")
    if cfg.scenario.split_fractions[1] <= 0.0:
        raise ConfigError("grid search needs a validation split (fractions[1] > 0)")

    keys = list(grid.keys())
    base = cfg.to_dict()
    table: list[dict] = []
    best_idx = -1
    best_acc = -1.0
    for i, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        point = deepcopy(base)
        for k, v in zip(keys, combo):
            _set_path(point, k, v)
        _set_path(point, "train.seeds", [cfg.train.seeds[0]])
        _set_path(point, "train.eval_on", "val")
        run_cfg = RunConfig.from_dict(point)
        result = run_experiment(run_cfg, out_dir=None)
        val_acc = result.aggregates["acc"]["mean"]
        table.append(
            {"index": i, "overrides": dict(zip(keys, combo)), "val_acc": val_acc}
        )
        if val_acc > best_acc:
            best_acc = val_acc
            best_idx = i

    table_ranked = sorted(table, key=lambda r: (-r["val_acc"], r["index"]))
    best = deepcopy(base)
    for k, v in table[best_idx]["overrides"].items():
        _set_path(best, k, v)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "grid.json").write_text(
            json.dumps(
                {"best_index": best_idx, "best_config": best, "table": table_ranked},
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
    return best, table_ranked
