"""Experiment orchestration: dataset resolution, training loops, evaluation.

One run = one config x several seeds. Per seed: build the experience stream,
train each experience under the strategy's hooks and the configured regime
(offline epochs, online single pass, or 128-sample mini-experiences), then
evaluate every experience's test set to fill one accuracy-matrix row.
Everything is deterministic given the config, including the seed list.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import scenario as sc
from .. import stain
from ..data import Dataset, SplitSpec, downscale, load_folder, synth_generate
from ..errors import ConfigError
from ..nncore import (
    ModelSpec,
    ConvBlock,
    OptimizerState,
    as_batch,
    forward,
    init_model,
    loss_and_backward,
    nearest_mean_classify_batch,
    save_checkpoint,
    sgd_step,
)
from ..strategy import Strategy, TrainContext, make_strategy
from .config import DataConfig, RunConfig
from .metrics import AccMatrix, MetricSet, compute_metrics

MINI_EXPERIENCE_SIZE = 128
_EVAL_BATCH = 256


def max_workers() -> int:
    """Worker cap for seed-level parallelism, from HISTOCL_THREADS (default 1)."""
    raw = os.environ.get("HISTOCL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def domain_specs_from_config(overrides: dict) -> tuple[stain.DomainSpec, ...]:
    """Default domain specs with per-domain interval overrides applied."""
    key_map = {
        "eosin_intensity": "eosin_intensity_range",
        "hema_intensity": "hema_intensity_range",
        "eosin_hue": "eosin_hue_delta_range",
        "hema_hue": "hema_hue_delta_range",
        "eosin_sat": "eosin_sat_range",
        "hema_sat": "hema_sat_range",
    }
    specs = []
    for spec in stain.default_domain_specs():
        ov = overrides.get(str(spec.domain_id))
        if ov:
            fields = {key_map[k]: tuple(v) for k, v in ov.items()}
            spec = stain.DomainSpec(domain_id=spec.domain_id, **{
                **{key_map[k]: getattr(spec, key_map[k]) for k in key_map},
                **fields,
            })
        specs.append(spec)
    return tuple(specs)


def resolve_dataset(data_cfg: DataConfig) -> Dataset:
    if data_cfg.source == "synth":
        ds = synth_generate(
            data_cfg.classes, data_cfg.per_class, data_cfg.side, data_cfg.seed
        )
    else:
        ds = load_folder(data_cfg.root, data_cfg.expected_classes)
        if data_cfg.downscale:
            ds = Dataset(
                [downscale(p, data_cfg.downscale) for p in ds.patches],
                list(ds.class_names),
                dict(ds.metadata),
            )
    if data_cfg.augment:
        specs = domain_specs_from_config(data_cfg.domains)
        ds = stain.build_augmented_dataset(ds, specs, data_cfg.augment_seed)
    return ds


def build_stream(cfg: RunConfig, ds: Dataset, ds_b: Dataset | None, seed: int) -> sc.ExperienceStream:
    s = cfg.scenario
    split_spec = SplitSpec(s.split_fractions, seed=seed, stratified=s.split_stratified)
    if s.kind == "data_il":
        return sc.build_data_il(ds, s.n_experiences, seed=seed, split_spec=split_spec)
    if s.kind == "domain_il":
        return sc.build_domain_il(ds, s.domain_order, split_spec=split_spec)
    if s.kind in ("class_il", "task_il"):
        if s.grouping is None:
            raise ConfigError(f"scenario '{s.kind}' requires 'scenario.grouping'")
        order = s.class_order or "".join(str(c + 1) for c in range(ds.n_classes))
        plan = sc.ClassPlan.from_strings(order, s.grouping)
        builder = sc.build_class_il if s.kind == "class_il" else sc.build_task_il
        return builder(ds, plan, split_spec=split_spec)
    if s.kind == "two_tumor":
        return sc.build_two_tumor_domain_il(
            ds, ds_b, order=s.tumor_order, volume_ratio=s.tumor_ratio,
            seed=seed, split_spec=split_spec,
        )
    raise ConfigError(f"unknown scenario kind {s.kind}")


def make_model_spec(cfg: RunConfig, stream: sc.ExperienceStream, seed: int) -> ModelSpec:
    blocks = tuple(ConvBlock(int(c), int(k), bool(p)) for c, k, p in cfg.model.conv_blocks)
    if stream.scenario_kind == "task_il":
        heads = tuple((e.index, len(e.classes_present)) for e in stream.experiences)
    else:
        heads = ((0, len(stream.class_names)),)
    return ModelSpec(
        input_side=cfg.model.input_side, conv_blocks=blocks, heads=heads, init_seed=seed
    )


@dataclass
class SeedRunResult:
    seed: int
    acc_matrix: np.ndarray
    metrics: MetricSet
    train_sizes: list[int]
    examples_consumed: list[int]
    mini_experience_sizes: list[list[int]]
    wall_seconds: list[float]
    # not serialized: final parameters and per-experience strategy telemetry
    final_params: np.ndarray | None = None
    strategy_probes: list[dict] | None = None


def _head_classes_for(stream: sc.ExperienceStream) -> dict[int, list[int]]:
    if stream.scenario_kind == "task_il":
        return {e.index: sorted(e.classes_present) for e in stream.experiences}
    return {0: list(range(len(stream.class_names)))}


def _iter_batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _evaluate_row(
    ctx: TrainContext,
    strategy: Strategy,
    stream: sc.ExperienceStream,
    eval_on: str,
) -> np.ndarray:
    """Accuracy on every experience's evaluation set at the current params."""
    row = np.zeros(len(stream))
    means = None
    if strategy.classifier_mode == "nearest_mean_of_exemplars":
        means = strategy.exemplar_means()
    for j, exp in enumerate(stream.experiences):
        ds = exp.test if eval_on == "test" else (exp.val or exp.test)
        correct = 0
        for start in range(0, len(ds), _EVAL_BATCH):
            chunk = ds.patches[start : start + _EVAL_BATCH]
            labels = np.asarray([p.class_id for p in chunk])
            preds = _predict(ctx, strategy, stream, chunk, exp, means)
            correct += int((preds == labels).sum())
        row[j] = correct / len(ds)
    return row


def _predict(ctx, strategy, stream, chunk, exp, means) -> np.ndarray:
    x = as_batch(chunk, ctx.spec.input_side)
    mode = strategy.classifier_mode
    if mode == "head":
        head_id = exp.task_id if not ctx.single_head else 0
        out = forward(ctx.params, ctx.spec, x, head_id, dtype=ctx.dtype)
        classes = ctx.head_classes[head_id]
        if ctx.single_head:
            seen = sorted(ctx.classes_seen)
            idx = ctx.head_output_indices(0, seen)
            picks = np.argmax(out.logits[:, idx], axis=1)
            return np.asarray([seen[i] for i in picks])
        picks = np.argmax(out.logits, axis=1)
        return np.asarray([classes[i] for i in picks])
    feats = forward(ctx.params, ctx.spec, x, ctx.spec.heads[0][0], dtype=ctx.dtype).features
    feats = feats.astype(np.float64)
    feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
    if mode == "nearest_mean_of_exemplars":
        if not means:
            return np.full(len(chunk), -1)
        return nearest_mean_classify_batch(feats, means)
    if mode == "prototypes":
        store = strategy.store
        classes = store.classes()
        if not classes:
            return np.full(len(chunk), -1)
        sims = feats @ store.matrix().T
        return np.asarray([classes[i] for i in np.argmax(sims, axis=1)])
    raise ValueError(f"unknown classifier mode {mode}")


def run_single_seed(cfg: RunConfig, seed: int, out_dir: Path | None = None) -> SeedRunResult:
    ds = resolve_dataset(cfg.data)
    ds_b = resolve_dataset(cfg.data.b) if cfg.data.b is not None else None
    stream = build_stream(cfg, ds, ds_b, seed)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = out_dir / f"stream_manifest_{seed}.json"
        manifest_path.write_text(
            json.dumps(stream.manifest(), indent=2, sort_keys=True) + "\n"
        )

    spec = make_model_spec(cfg, stream, seed)
    params = init_model(spec)
    ctx = TrainContext(
        spec=spec,
        params=params,
        seed=seed,
        batch_size=cfg.train.batch_size,
        single_head=stream.scenario_kind != "task_il",
    )
    ctx.head_classes = _head_classes_for(stream)
    strategy = make_strategy(cfg.strategy.name, cfg.strategy.params)
    strategy.bind(ctx)

    def fresh_optimizer() -> OptimizerState:
        # the epoch schedule restarts with each experience, so does the velocity
        return OptimizerState.for_params(
            params,
            lr=cfg.train.lr,
            momentum=cfg.train.momentum,
            weight_decay=cfg.train.weight_decay,
            epoch_schedule=tuple((int(e), float(m)) for e, m in cfg.train.lr_schedule),
        )

    regime = cfg.resolved_regime()
    epochs = cfg.effective_epochs()

    t = len(stream)
    acc = np.zeros((t, t))
    train_sizes: list[int] = []
    consumed: list[int] = []
    mini_sizes: list[list[int]] = []
    wall: list[float] = []
    probes: list[dict] = []

    for k, exp in enumerate(stream.experiences):
        tic = time.perf_counter()
        head_id = exp.index if stream.scenario_kind == "task_il" else 0
        ctx.begin_experience(k, exp.classes_present, head_id)
        opt = fresh_optimizer()
        train_ds = strategy.on_experience_start(k, exp.train)
        train_sizes.append(len(train_ds))
        n = len(train_ds)
        seen_count = 0
        chunk_sizes: list[int] = []

        if regime == "mini128":
            perm = ctx.rng("train", k, 0).permutation(n)
            chunks = [perm[s : s + MINI_EXPERIENCE_SIZE] for s in range(0, n, MINI_EXPERIENCE_SIZE)]
            chunk_sizes = [len(c) for c in chunks]
            epoch_plan = [(0, c) for c in chunks]
        else:
            epoch_plan = []
            for epoch in range(epochs):
                perm = ctx.rng("train", k, epoch).permutation(n)
                epoch_plan.append((epoch, perm))

        for epoch, order in epoch_plan:
            for batch_idx in _iter_batches(len(order), cfg.train.batch_size, order):
                patches = [train_ds.patches[int(i)] for i in batch_idx]
                batch = ctx.make_batch(patches, head_id)
                seen_count += len(patches)
                batch = strategy.extend_batch(batch)
                terms = strategy.loss_terms(batch)
                _, grads, out = loss_and_backward(
                    ctx.params, spec, batch.x, batch.head_id, terms,
                    dtype=ctx.dtype, return_output=True,
                )
                grads = strategy.transform_gradient(grads)
                sgd_step(ctx.params, grads, opt, epoch)
                ctx.global_step += 1
                strategy.on_step_end(batch, out)

        strategy.on_experience_end(k)
        wall.append(time.perf_counter() - tic)
        consumed.append(seen_count)
        mini_sizes.append(chunk_sizes)
        probes.append(probe_strategy(strategy))
        acc[k] = _evaluate_row(ctx, strategy, stream, cfg.train.eval_on)

    chance = [1.0 / len(e.classes_present) for e in stream.experiences]
    metrics = compute_metrics(AccMatrix(acc), chance)

    if cfg.train.save_checkpoint and out_dir is not None:
        extra, extra_arrays = strategy_state(strategy)
        save_checkpoint(out_dir / f"model_seed{seed}.ckpt", spec, ctx.params,
                        extra=extra, extra_arrays=extra_arrays)

    return SeedRunResult(
        seed=seed,
        acc_matrix=acc,
        metrics=metrics,
        train_sizes=train_sizes,
        examples_consumed=consumed,
        mini_experience_sizes=mini_sizes,
        wall_seconds=wall,
        final_params=ctx.params.values.copy(),
        strategy_probes=probes,
    )


def probe_strategy(strategy: Strategy) -> dict:
    """Per-experience telemetry on strategy memories (for contract checks)."""
    probe: dict = {}
    memory = getattr(strategy, "memory", None)
    if memory is not None:
        probe["exemplar_total"] = memory.total()
        probe["exemplar_budget"] = memory.budget
    buffer = getattr(strategy, "buffer", None)
    if buffer is not None:
        if hasattr(buffer, "counts"):
            probe["buffer_counts"] = buffer.counts()
        else:
            probe["buffer_size"] = len(buffer)
            probe["buffer_capacity"] = buffer.capacity
    store = getattr(strategy, "store", None)
    if store is not None:
        probe["prototype_count"] = len(store.classes())
        probe["prototype_max_norm_deviation"] = store.max_norm_deviation
    return probe


def strategy_state(strategy: Strategy) -> tuple[dict, dict[str, np.ndarray]]:
    """Serializable strategy memories: exemplars by key, arrays as float32."""
    extra: dict = {"strategy": strategy.name}
    arrays: dict[str, np.ndarray] = {}
    anchors = getattr(strategy, "anchors", None)
    if anchors:
        for i, (theta, fisher) in enumerate(anchors):
            arrays[f"anchor_{i}"] = theta
            arrays[f"fisher_{i}"] = fisher
    if getattr(strategy, "anchor", None) is not None:
        arrays["anchor"] = strategy.anchor
        arrays["fisher_running"] = strategy.running_fisher
    memory = getattr(strategy, "memory", None)
    if memory is not None:
        extra["exemplars"] = {
            str(c): [p.source_key for p in memory.per_class[c]] for c in memory.classes()
        }
    store = getattr(strategy, "store", None)
    if store is not None and store.classes():
        extra["prototype_classes"] = store.classes()
        arrays["prototypes"] = store.matrix()
    buffer = getattr(strategy, "buffer", None)
    if buffer is not None and hasattr(buffer, "slots"):
        extra["buffer_keys"] = [p.source_key for p in buffer.slots]
    return extra, arrays


def _run_seed_entry(cfg_dict: dict, seed: int, out_dir: str | None) -> SeedRunResult:
    cfg = RunConfig.from_dict(cfg_dict)
    return run_single_seed(cfg, seed, Path(out_dir) if out_dir else None)


def run_experiment(cfg: RunConfig, out_dir: str | Path | None = None):
    """Run every seed and assemble a RunResult (see results module)."""
    from .results import RunResult

    out_path = Path(out_dir) if out_dir is not None else Path(cfg.output_dir)
    workers = max_workers()
    seeds = cfg.train.seeds
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            futures = [
                pool.submit(_run_seed_entry, cfg.to_dict(), s, str(out_path)) for s in seeds
            ]
            seed_results = [f.result() for f in futures]
    else:
        seed_results = [run_single_seed(cfg, s, out_path) for s in seeds]
    return RunResult.build(cfg, seed_results)
