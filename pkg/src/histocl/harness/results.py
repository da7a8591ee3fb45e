"""Result assembly and persistence: canonical JSON, CSV matrices, SVG curves.

``result.json`` is canonical: keys sorted, floats rounded to 5 decimals, so
identical configs produce byte-identical files and load -> re-serialize is a
fixed point. Wall-clock timings are deliberately kept out of it (they land
in ``timings.json``) so the determinism contract holds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .metrics import aggregate
from .runner import SeedRunResult

SCHEMA_VERSION = 1
_PALETTE = ("#1b6ca8", "#c0392b", "#1e8449", "#8e44ad", "#d68910", "#17a589",
            "#884ea0", "#2e4053", "#a04000")


def _round5(x) -> float:
    return round(float(x), 5)


@dataclass
class RunResult:
    """Config echo, per-seed matrices and metrics, cross-seed aggregates."""

    config: dict
    seed_results: list[SeedRunResult]
    aggregates: dict

    @classmethod
    def build(cls, cfg: RunConfig, seed_results: list[SeedRunResult]) -> "RunResult":
        aggregates = {}
        for metric in ("acc", "bwt", "fwt"):
            values = [getattr(r.metrics, metric) for r in seed_results]
            mean, std = aggregate(values)
            aggregates[metric] = {"mean": _round5(mean), "std": _round5(std)}
        return cls(config=cfg.to_dict(), seed_results=seed_results, aggregates=aggregates)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "seeds": [r.seed for r in self.seed_results],
            "per_seed": [
                {
                    "seed": r.seed,
                    "acc_matrix": [[_round5(v) for v in row] for row in r.acc_matrix],
                    "acc": _round5(r.metrics.acc),
                    "bwt": _round5(r.metrics.bwt),
                    "fwt": _round5(r.metrics.fwt),
                    "train_sizes": list(r.train_sizes),
                    "examples_consumed": list(r.examples_consumed),
                    "mini_experience_sizes": [list(c) for c in r.mini_experience_sizes],
                }
                for r in self.seed_results
            ],
            "aggregate": self.aggregates,
        }


def dumps_canonical(d: dict) -> str:
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def write_results(result: RunResult, out_dir: str | Path) -> dict[str, Path]:
    """Emit result.json, per-seed CSV matrices, curves.svg and timings.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = result.to_dict()
    paths: dict[str, Path] = {}

    rpath = out / "result.json"
    rpath.write_text(dumps_canonical(d))
    paths["result"] = rpath

    for entry in d["per_seed"]:
        paths[f"csv_{entry['seed']}"] = _write_csv(out, entry["seed"], entry["acc_matrix"])

    paths["svg"] = _write_svg(out, d)

    tpath = out / "timings.json"
    tpath.write_text(
        dumps_canonical(
            {
                "wall_seconds_per_experience": {
                    str(r.seed): [round(w, 3) for w in r.wall_seconds]
                    for r in result.seed_results
                }
            }
        )
    )
    paths["timings"] = tpath
    return paths


def regenerate(result_json: str | Path, out_dir: str | Path | None = None) -> dict[str, Path]:
    """Rebuild CSV/SVG artifacts from an existing result.json, byte-identically."""
    result_json = Path(result_json)
    d = json.loads(result_json.read_text())
    out = Path(out_dir) if out_dir is not None else result_json.parent
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    for entry in d["per_seed"]:
        paths[f"csv_{entry['seed']}"] = _write_csv(out, entry["seed"], entry["acc_matrix"])
    paths["svg"] = _write_svg(out, d)
    return paths


def _write_csv(out: Path, seed: int, matrix: list[list[float]]) -> Path:
    t = len(matrix)
    lines = ["after_exp," + ",".join(f"test_{j}" for j in range(t))]
    for i, row in enumerate(matrix):
        lines.append(f"{i}," + ",".join(f"{v:.5f}" for v in row))
    path = out / f"acc_matrix_{seed}.csv"
    path.write_text("\n".join(lines) + "\n")
    return path


def _write_svg(out: Path, result_dict: dict) -> Path:
    """Accuracy-vs-experience curves, one polyline per test stream.

    Curves show the mean over seeds. Hand-rolled SVG keeps the artifact
    deterministic.
    """
    matrices = [np.asarray(e["acc_matrix"], dtype=np.float64) for e in result_dict["per_seed"]]
    mean = np.mean(matrices, axis=0)
    t = mean.shape[0]

    width, height, margin = 480, 320, 48
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    def px(i: int) -> float:
        return margin + (plot_w * i / max(t - 1, 1))

    def py(v: float) -> float:
        return margin + plot_h * (1.0 - v)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{margin + plot_h}" x2="{margin + plot_w}" '
        f'y2="{margin + plot_h}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{margin + plot_h}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" font-size="12" '
        f'text-anchor="middle">experience</text>',
        f'<text x="14" y="{height / 2:.1f}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 14 {height / 2:.1f})">accuracy</text>',
    ]
    for v in (0.0, 0.5, 1.0):
        parts.append(
            f'<text x="{margin - 6}" y="{py(v) + 4:.1f}" font-size="10" '
            f'text-anchor="end">{v:.1f}</text>'
        )
    for i in range(t):
        parts.append(
            f'<text x="{px(i):.1f}" y="{margin + plot_h + 16}" font-size="10" '
            f'text-anchor="middle">{i}</text>'
        )
    for j in range(t):
        color = _PALETTE[j % len(_PALETTE)]
        points = " ".join(f"{px(i):.1f},{py(mean[i][j]):.1f}" for i in range(t))
        parts.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{points}"/>'
        )
        parts.append(
            f'<text x="{margin + plot_w + 4}" y="{py(mean[t - 1][j]) + 4:.1f}" '
            f'font-size="10" fill="{color}">t{j}</text>'
        )
    parts.append("</svg>")
    path = out / "curves.svg"
    path.write_text("\n".join(parts) + "\n")
    return path
