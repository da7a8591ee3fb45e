"""Experiment configuration: JSON schema, validation, normalization.

A config file is a JSON object with sections ``data``, ``scenario``,
``model``, ``strategy``, ``train``, ``output``. Every key is validated;
unknown keys are rejected with the offending path in the message. The
parsed config echoes back into ``result.json`` verbatim (normalized), so
identical configs produce identical result files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from ..data import SplitSpec
from ..errors import ConfigError
from ..nncore import ConvBlock
from ..strategy import STRATEGY_DEFAULTS

SCENARIO_KINDS = ("data_il", "domain_il", "class_il", "task_il", "two_tumor")
REGIMES = ("offline", "online", "mini128")

_DOMAIN_INTERVAL_KEYS = (
    "eosin_intensity",
    "hema_intensity",
    "eosin_hue",
    "hema_hue",
    "eosin_sat",
    "hema_sat",
)


def _check_keys(d: dict, allowed: set[str], path: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in '{path}'")


@dataclass
class DataConfig:
    source: str = "synth"
    classes: int = 6
    per_class: int = 200
    side: int = 32
    seed: int = 1234
    root: str | None = None
    expected_classes: list[str] | None = None
    downscale: int | None = None
    augment: bool = False
    augment_seed: int = 7
    domains: dict = field(default_factory=dict)
    b: "DataConfig | None" = None

    @classmethod
    def from_dict(cls, d: dict, path: str = "data", allow_nested: bool = True) -> "DataConfig":
        allowed = {
            "source", "classes", "per_class", "side", "seed", "root",
            "expected_classes", "downscale", "augment", "augment_seed", "domains",
        }
        if allow_nested:
            allowed.add("b")
        _check_keys(d, allowed, path)
        cfg = cls(**{k: v for k, v in d.items() if k not in ("b", "domains")})
        if cfg.source not in ("synth", "folder"):
            raise ConfigError(f"'{path}.source' must be 'synth' or 'folder'")
        if cfg.source == "folder" and not cfg.root:
            raise ConfigError(f"'{path}.root' required for folder source")
        for dom_key, intervals in d.get("domains", {}).items():
            if not str(dom_key).isdigit() or not 1 <= int(dom_key) <= 5:
                raise ConfigError(f"'{path}.domains' keys must be domain ids 1..5")
            _check_keys(intervals, set(_DOMAIN_INTERVAL_KEYS), f"{path}.domains.{dom_key}")
            cfg.domains[str(dom_key)] = {
                k: [float(v[0]), float(v[1])] for k, v in intervals.items()
            }
        if allow_nested and d.get("b") is not None:
            cfg.b = DataConfig.from_dict(d["b"], f"{path}.b", allow_nested=False)
        return cfg

    def to_dict(self) -> dict:
        out = {
            "source": self.source,
            "augment": self.augment,
            "augment_seed": self.augment_seed,
            "domains": self.domains,
        }
        if self.source == "synth":
            out.update(
                {"classes": self.classes, "per_class": self.per_class,
                 "side": self.side, "seed": self.seed}
            )
        else:
            out.update({"root": self.root, "expected_classes": self.expected_classes})
            if self.downscale:
                out["downscale"] = self.downscale
        if self.b is not None:
            out["b"] = self.b.to_dict()
        return out


@dataclass
class ScenarioConfig:
    kind: str = "class_il"
    class_order: str | None = None
    grouping: str | None = None
    domain_order: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    n_experiences: int = 5
    tumor_ratio: float = 1.0
    tumor_order: str = "a_first"
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)
    split_stratified: bool = True

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        _check_keys(
            d,
            {"kind", "class_order", "grouping", "domain_order", "n_experiences",
             "tumor_ratio", "tumor_order", "split"},
            "scenario",
        )
        split = d.get("split", {})
        _check_keys(split, {"fractions", "stratified"}, "scenario.split")
        cfg = cls(
            kind=d.get("kind", "class_il"),
            class_order=d.get("class_order"),
            grouping=d.get("grouping"),
            domain_order=list(d.get("domain_order", [1, 2, 3, 4, 5])),
            n_experiences=int(d.get("n_experiences", 5)),
            tumor_ratio=float(d.get("tumor_ratio", 1.0)),
            tumor_order=d.get("tumor_order", "a_first"),
            split_fractions=tuple(split.get("fractions", (0.7, 0.15, 0.15))),
            split_stratified=bool(split.get("stratified", True)),
        )
        if cfg.kind not in SCENARIO_KINDS:
            raise ConfigError(f"'scenario.kind' must be one of {SCENARIO_KINDS}")
        if cfg.tumor_order not in ("a_first", "b_first"):
            raise ConfigError("'scenario.tumor_order' must be 'a_first' or 'b_first'")
        try:
            SplitSpec(cfg.split_fractions, 0, cfg.split_stratified)
        except ValueError as e:
            raise ConfigError(f"bad 'scenario.split': {e}") from e
        return cfg

    def to_dict(self) -> dict:
        out: dict = {
            "kind": self.kind,
            "split": {"fractions": list(self.split_fractions),
                      "stratified": self.split_stratified},
        }
        if self.kind in ("class_il", "task_il"):
            out["class_order"] = self.class_order
            out["grouping"] = self.grouping
        elif self.kind == "domain_il":
            out["domain_order"] = self.domain_order
        elif self.kind == "data_il":
            out["n_experiences"] = self.n_experiences
        elif self.kind == "two_tumor":
            out["tumor_ratio"] = self.tumor_ratio
            out["tumor_order"] = self.tumor_order
        return out


@dataclass
class ModelConfig:
    input_side: int = 32
    conv_blocks: list = field(default_factory=lambda: [[16, 3, True], [32, 3, True], [64, 3, False]])

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        _check_keys(d, {"input_side", "conv_blocks"}, "model")
        cfg = cls(
            input_side=int(d.get("input_side", 32)),
            conv_blocks=[list(b) for b in d.get("conv_blocks",
                                                [[16, 3, True], [32, 3, True], [64, 3, False]])],
        )
        try:
            [ConvBlock(int(c), int(k), bool(p)) for c, k, p in cfg.conv_blocks]
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad 'model.conv_blocks': {e}") from e
        return cfg

    def to_dict(self) -> dict:
        return {"input_side": self.input_side, "conv_blocks": self.conv_blocks}


@dataclass
class StrategyConfig:
    name: str = "finetune"
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        _check_keys(d, {"name", "params"}, "strategy")
        cfg = cls(name=d.get("name", "finetune"), params=dict(d.get("params", {})))
        if cfg.name not in STRATEGY_DEFAULTS:
            raise ConfigError(
                f"unknown strategy '{cfg.name}' (have {sorted(STRATEGY_DEFAULTS)})"
            )
        unknown = set(cfg.params) - set(STRATEGY_DEFAULTS[cfg.name])
        if unknown:
            raise ConfigError(
                f"unknown hyperparameters {sorted(unknown)} for strategy '{cfg.name}'"
            )
        return cfg

    def to_dict(self) -> dict:
        return {"name": self.name, "params": self.params}


@dataclass
class TrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lr_schedule: list = field(default_factory=lambda: [[10, 0.1], [13, 0.1]])
    regime: str | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    eval_on: str = "test"
    save_checkpoint: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        _check_keys(
            d,
            {"epochs", "batch_size", "lr", "momentum", "weight_decay", "lr_schedule",
             "regime", "seeds", "eval_on", "save_checkpoint"},
            "train",
        )
        cfg = cls(
            epochs=int(d.get("epochs", 15)),
            batch_size=int(d.get("batch_size", 16)),
            lr=float(d.get("lr", 0.1)),
            momentum=float(d.get("momentum", 0.9)),
            weight_decay=float(d.get("weight_decay", 1e-5)),
            lr_schedule=[list(s) for s in d.get("lr_schedule", [[10, 0.1], [13, 0.1]])],
            regime=d.get("regime"),
            seeds=[int(s) for s in d.get("seeds", [0])],
            eval_on=d.get("eval_on", "test"),
            save_checkpoint=bool(d.get("save_checkpoint", False)),
        )
        if cfg.epochs < 1 or cfg.batch_size < 1:
            raise ConfigError("'train.epochs' and 'train.batch_size' must be >= 1")
        if not cfg.seeds:
            raise ConfigError("'train.seeds' needs at least one seed")
        if cfg.regime is not None and cfg.regime not in REGIMES:
            raise ConfigError(f"'train.regime' must be one of {REGIMES}")
        if cfg.eval_on not in ("test", "val"):
            raise ConfigError("'train.eval_on' must be 'test' or 'val'")
        return cfg

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_schedule": self.lr_schedule,
            "regime": self.regime,
            "seeds": self.seeds,
            "eval_on": self.eval_on,
            "save_checkpoint": self.save_checkpoint,
        }


@dataclass
class RunConfig:
    data: DataConfig
    scenario: ScenarioConfig
    model: ModelConfig
    strategy: StrategyConfig
    train: TrainConfig
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _check_keys(d, {"data", "scenario", "model", "strategy", "train", "output"}, "<root>")
        out = d.get("output", {})
        _check_keys(out, {"dir"}, "output")
        cfg = cls(
            data=DataConfig.from_dict(d.get("data", {})),
            scenario=ScenarioConfig.from_dict(d.get("scenario", {})),
            model=ModelConfig.from_dict(d.get("model", {})),
            strategy=StrategyConfig.from_dict(d.get("strategy", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            output_dir=out.get("dir", "out"),
        )
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(d)

    def validate(self) -> None:
        if self.scenario.kind == "two_tumor" and self.data.b is None:
            raise ConfigError("scenario 'two_tumor' requires a 'data.b' section")
        if self.strategy.name == "icarl" and self.scenario.kind == "task_il":
            raise ConfigError("icarl supports single-head scenarios only, not task_il")
        if self.scenario.kind in ("data_il", "domain_il") and self.data.source == "synth":
            if not self.data.augment:
                raise ConfigError(
                    f"scenario '{self.scenario.kind}' needs domain ids: set 'data.augment'"
                )

    def resolved_regime(self) -> str:
        """Final training regime; online regimes force a single epoch."""
        forced = {"agem": "online", "cope": "mini128"}.get(self.strategy.name)
        return self.train.regime or forced or "offline"

    def effective_epochs(self) -> int:
        return 1 if self.resolved_regime() in ("online", "mini128") else self.train.epochs

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "scenario": self.scenario.to_dict(),
            "model": self.model.to_dict(),
            "strategy": self.strategy.to_dict(),
            "train": self.train.to_dict(),
            "output": {"dir": self.output_dir},
        }
