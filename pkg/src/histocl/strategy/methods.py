"""The continual-learning methods: EWC, online EWC, LwF, iCaRL, A-GEM, CoPE.

Each method is a :class:`~histocl.strategy.base.Strategy` subclass adding
loss terms, gradient transforms, or memory management around the shared
training loop. Hyperparameter defaults follow the desk-scale tuning in the
package configs and are overridable per run.
"""

from __future__ import annotations

import numpy as np

from ..data import Dataset, Patch, concat_datasets
from ..errors import BudgetTooSmallError, ZeroReferenceError
from ..nncore import (
    CrossEntropy,
    Distillation,
    EwcPenalty,
    ModelSpec,
    ParamVector,
    PrototypePpp,
    as_batch,
    forward,
    loss_and_backward,
)
from .base import Batch, Strategy, TrainContext
from .memory import (
    BalancedBuffer,
    EpisodicBuffer,
    ExemplarMemory,
    PrototypeStore,
    herding_select,
)


class FisherDiag:
    """Diagonal Fisher information aligned with the flat parameter layout."""

    def __init__(self, values: np.ndarray, sample_count: int) -> None:
        values = np.asarray(values, dtype=np.float64)
        if not np.isfinite(values).all() or (values < 0).any():
            raise ValueError("Fisher values must be finite and non-negative")
        self.values = values
        self.sample_count = sample_count


def compute_fisher(
    params: ParamVector,
    spec: ModelSpec,
    patches: list[Patch],
    n_samples: int,
    seed,
    head_of=None,
    dtype: type = np.float32,
) -> FisherDiag:
    """Diagonal Fisher estimate: mean squared score over sampled examples.

    For each drawn example, a label is sampled from the model's own softmax
    (true Fisher, not the empirical variant) and the squared gradient of its
    log-likelihood accumulates. Deterministic per seed.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if head_of is None:
        first_head = spec.heads[0][0]
        head_of = lambda p: first_head  # noqa: E731
    rng = np.random.default_rng(seed)
    acc = np.zeros(params.values.size, dtype=np.float64)
    idx = rng.integers(0, len(patches), size=n_samples)
    for i in idx:
        p = patches[int(i)]
        head_id = head_of(p)
        x = as_batch([p], spec.input_side)
        out = forward(params, spec, x, head_id, dtype=dtype)
        probs = np.exp(out.logits.astype(np.float64) - out.logits.max())
        probs = (probs / probs.sum()).ravel()
        y = int(rng.choice(len(probs), p=probs))
        _, grads = loss_and_backward(
            params, spec, x, head_id, [CrossEntropy(np.asarray([y]))], dtype=dtype
        )
        g = grads.astype(np.float64)
        acc += g * g
    return FisherDiag(acc / n_samples, n_samples)


class EWC(Strategy):
    """Quadratic anchor penalty per finished experience, Fisher-weighted."""

    def __init__(self, lam: float = 100.0, fisher_samples: int = 200) -> None:
        super().__init__(name="ewc")
        if lam < 0:
            raise ValueError("lam must be >= 0")
        self.lam = lam
        self.fisher_samples = fisher_samples
        self.anchors: list[tuple[np.ndarray, np.ndarray]] = []
        self._new: Dataset | None = None

    def on_experience_start(self, k: int, train_ds: Dataset) -> Dataset:
        self._new = train_ds
        return train_ds

    def loss_terms(self, batch: Batch):
        terms = [CrossEntropy(batch.labels)]
        if self.anchors:
            terms.append(EwcPenalty(tuple(self.anchors), self.lam))
        return terms

    def on_experience_end(self, k: int) -> None:
        ctx = self.ctx
        fisher = compute_fisher(
            ctx.params,
            ctx.spec,
            self._new.patches,
            min(self.fisher_samples, max(1, len(self._new))),
            ctx.rng("fisher", k),
            head_of=ctx.head_for,
            dtype=ctx.dtype,
        )
        self.anchors.append((ctx.params.values.copy(), fisher.values))


class OnlineEWC(Strategy):
    """Single anchor with a decayed running sum of Fisher importances."""

    def __init__(self, lam: float = 100.0, decay: float = 0.9, fisher_samples: int = 200) -> None:
        super().__init__(name="online_ewc")
        if lam < 0:
            raise ValueError("lam must be >= 0")
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must be in [0, 1]")
        self.lam = lam
        self.decay = decay
        self.fisher_samples = fisher_samples
        self.anchor: np.ndarray | None = None
        self.running_fisher: np.ndarray | None = None
        self._new: Dataset | None = None

    def on_experience_start(self, k: int, train_ds: Dataset) -> Dataset:
        self._new = train_ds
        return train_ds

    def loss_terms(self, batch: Batch):
        terms = [CrossEntropy(batch.labels)]
        if self.anchor is not None:
            terms.append(EwcPenalty(((self.anchor, self.running_fisher),), self.lam))
        return terms

    def on_experience_end(self, k: int) -> None:
        ctx = self.ctx
        fisher = compute_fisher(
            ctx.params,
            ctx.spec,
            self._new.patches,
            min(self.fisher_samples, max(1, len(self._new))),
            ctx.rng("fisher", k),
            head_of=ctx.head_for,
            dtype=ctx.dtype,
        )
        if self.running_fisher is None:
            self.running_fisher = fisher.values
        else:
            self.running_fisher = self.decay * self.running_fisher + fisher.values
        self.anchor = ctx.params.values.copy()


class LwF(Strategy):
    """Distill each batch against a teacher frozen at experience start."""

    def __init__(self, distill_weight: float = 1.0, temperature: float = 2.0) -> None:
        super().__init__(name="lwf")
        if distill_weight < 0:
            raise ValueError("distill_weight must be >= 0")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.distill_weight = distill_weight
        self.temperature = temperature
        self.teacher: ParamVector | None = None
        self._old_heads: list[int] = []
        self._old_output_indices: np.ndarray | None = None

    def on_experience_start(self, k: int, train_ds: Dataset) -> Dataset:
        ctx = self.ctx
        if k >= 1:
            self.teacher = ctx.params.copy()
            if ctx.single_head:
                old = sorted(ctx.classes_seen_before)
                self._old_output_indices = ctx.head_output_indices(0, old)
            else:
                self._old_heads = [h for h, _ in ctx.spec.heads[:k]]
        return train_ds

    def loss_terms(self, batch: Batch):
        terms = [CrossEntropy(batch.labels)]
        if self.teacher is None:
            return terms
        ctx = self.ctx
        if ctx.single_head:
            t_logits = ctx.logits_of(batch.x, batch.head_id, params=self.teacher)
            terms.append(
                Distillation(
                    teacher_logits=t_logits,
                    temperature=self.temperature,
                    weight=self.distill_weight,
                    output_indices=self._old_output_indices,
                )
            )
        else:
            for h in self._old_heads:
                t_logits = ctx.logits_of(batch.x, h, params=self.teacher)
                terms.append(
                    Distillation(
                        teacher_logits=t_logits,
                        temperature=self.temperature,
                        weight=self.distill_weight,
                        head_id=h,
                    )
                )
        return terms


class ICaRL(Strategy):
    """Herded exemplar rehearsal with distillation and a nearest-mean classifier.

    Training mixes stored exemplars into every experience and distills old
    outputs against the previous model; after each experience the budget is
    re-split evenly over seen classes, stored lists truncate to their
    herding-order prefix, and new classes herd their exemplars. A budget of
    0 disables the memory entirely (used for baseline-equivalence checks).
    """

    def __init__(
        self, budget: int = 2000, distill_weight: float = 1.0, temperature: float = 2.0
    ) -> None:
        super().__init__(name="icarl", classifier_mode="nearest_mean_of_exemplars")
        self.memory = ExemplarMemory(budget)
        self.distill_weight = distill_weight
        self.temperature = temperature
        self.teacher: ParamVector | None = None
        self._old_output_indices: np.ndarray | None = None
        self._new: Dataset | None = None

    def bind(self, ctx: TrainContext) -> None:
        if not ctx.single_head:
            raise ValueError("icarl supports single-head scenarios only")
        super().bind(ctx)

    def on_experience_start(self, k: int, train_ds: Dataset) -> Dataset:
        ctx = self.ctx
        self._new = train_ds
        if k >= 1:
            self.teacher = ctx.params.copy()
            old = sorted(ctx.classes_seen_before)
            self._old_output_indices = ctx.head_output_indices(0, old)
        stored = self.memory.all_patches()
        if stored:
            rehearsal = Dataset(stored, list(train_ds.class_names), {"rehearsal": True})
            return concat_datasets(train_ds, rehearsal)
        return train_ds

    def loss_terms(self, batch: Batch):
        terms = [CrossEntropy(batch.labels)]
        if self.teacher is not None:
            t_logits = self.ctx.logits_of(batch.x, batch.head_id, params=self.teacher)
            terms.append(
                Distillation(
                    teacher_logits=t_logits,
                    temperature=self.temperature,
                    weight=self.distill_weight,
                    output_indices=self._old_output_indices,
                )
            )
        return terms

    def on_experience_end(self, k: int) -> None:
        if self.memory.budget == 0:
            return
        ctx = self.ctx
        seen = sorted(ctx.classes_seen)
        m = self.memory.budget // len(seen)
        if m == 0:
            raise BudgetTooSmallError(
                f"budget {self.memory.budget} cannot cover {len(seen)} classes"
            )
        self.memory.truncate(m)
        new_classes = sorted({p.class_id for p in self._new.patches})
        for cid in new_classes:
            candidates = [p for p in self._new.patches if p.class_id == cid]
            feats = ctx.features_of(candidates).astype(np.float64)
            feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
            order = herding_select(feats, m)
            self.memory.store(cid, [candidates[j] for j in order])
        self.memory.check_budget()

    def exemplar_means(self) -> dict[int, np.ndarray]:
        """Class means of L2-normalized exemplar features at current params."""
        means: dict[int, np.ndarray] = {}
        for cid in self.memory.classes():
            feats = self.ctx.features_of(self.memory.per_class[cid]).astype(np.float64)
            feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
            means[cid] = feats.mean(axis=0)
        return means


def agem_project(g: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Drop the conflicting component of g along a reference gradient.

    Returns g itself when ``g . g_ref >= 0``; otherwise the projection
    ``g - (g . g_ref / g_ref . g_ref) g_ref``, computed in float64.
    """
    if g.shape != g_ref.shape:
        raise ValueError(f"shape mismatch {g.shape} vs {g_ref.shape}")
    g64 = np.asarray(g, dtype=np.float64)
    r64 = np.asarray(g_ref, dtype=np.float64)
    dot = float(g64 @ r64)
    if dot >= 0.0:
        return g
    nref2 = float(r64 @ r64)
    if np.sqrt(nref2) <= 1e-12:
        raise ZeroReferenceError("projection against a (near) zero reference gradient")
    out = g64 - (dot / nref2) * r64
    return out.astype(np.asarray(g).dtype, copy=False)


class AGEM(Strategy):
    """Online replay with gradient projection against a buffer gradient."""

    forced = "online"

    def __init__(self, capacity: int = 500, ref_batch_size: int = 64) -> None:
        super().__init__(name="agem", forced_regime="online")
        if capacity and capacity < ref_batch_size:
            raise ValueError("capacity must be >= ref_batch_size")
        if ref_batch_size < 1:
            raise ValueError("ref_batch_size must be >= 1")
        self.buffer = EpisodicBuffer(capacity)
        self.ref_batch_size = ref_batch_size
        self._new: Dataset | None = None

    def on_experience_start(self, k: int, train_ds: Dataset) -> Dataset:
        self._new = train_ds
        return train_ds

    def transform_gradient(self, grads: np.ndarray) -> np.ndarray:
        if len(self.buffer) == 0:
            return grads
        ctx = self.ctx
        ref = self.buffer.sample(self.ref_batch_size, ctx.rng("agem_ref", ctx.global_step))
        g_ref = ctx.ce_gradient(ref)
        return agem_project(grads, g_ref)

    def on_experience_end(self, k: int) -> None:
        rng = self.ctx.rng("agem_buffer", k)
        for p in self._new.patches:
            self.buffer.add(p, rng)


class CoPE(Strategy):
    """Online prototype rehearsal: balanced replay, PPP loss, evolving prototypes."""

    def __init__(self, capacity: int = 300, alpha: float = 0.9, tau: float = 0.1) -> None:
        super().__init__(name="cope", classifier_mode="prototypes", forced_regime="mini128")
        self.buffer = BalancedBuffer(capacity)
        self.alpha = alpha
        self.tau = tau
        self.store: PrototypeStore | None = None
        self._buffer_rng: np.random.Generator | None = None

    def bind(self, ctx: TrainContext) -> None:
        super().bind(ctx)
        self.store = PrototypeStore(dim=ctx.spec.feature_dim, alpha=self.alpha, tau=self.tau)

    def on_experience_start(self, k: int, train_ds: Dataset) -> Dataset:
        self._buffer_rng = self.ctx.rng("cope_buffer", k)
        return train_ds

    def extend_batch(self, batch: Batch) -> Batch:
        ctx = self.ctx
        replay = self.buffer.sample(
            min(ctx.batch_size, len(self.buffer)), ctx.rng("cope_replay", ctx.global_step)
        )
        patches = batch.patches + replay
        for p in patches:
            self.store.ensure(p.class_id, ctx.rng("cope_proto", p.class_id))
        merged = ctx.make_batch(patches, batch.head_id)
        merged.new_count = len(batch.patches)
        return merged

    def loss_terms(self, batch: Batch):
        classes = self.store.classes()
        labels = np.asarray([classes.index(p.class_id) for p in batch.patches], dtype=np.int64)
        return [PrototypePpp(labels=labels, prototypes=self.store.matrix(), tau=self.tau)]

    def on_step_end(self, batch: Batch, output) -> None:
        feats = output.features.astype(np.float64)
        feats = feats / np.maximum(np.linalg.norm(feats, axis=1, keepdims=True), 1e-12)
        by_class: dict[int, list[int]] = {}
        for i, p in enumerate(batch.patches):
            by_class.setdefault(p.class_id, []).append(i)
        for cid in sorted(by_class):
            self.store.update(cid, feats[by_class[cid]].mean(axis=0))
        for p in batch.patches[: batch.new_count]:
            self.buffer.add(p, p.class_id, self._buffer_rng)


STRATEGY_DEFAULTS = {
    "finetune": {},
    "joint": {},
    "ewc": {"lam": 100.0, "fisher_samples": 200},
    "online_ewc": {"lam": 100.0, "decay": 0.9, "fisher_samples": 200},
    "lwf": {"distill_weight": 1.0, "temperature": 2.0},
    "icarl": {"budget": 2000, "distill_weight": 1.0, "temperature": 2.0},
    "agem": {"capacity": 500, "ref_batch_size": 64},
    "cope": {"capacity": 300, "alpha": 0.9, "tau": 0.1},
}


def make_strategy(name: str, params: dict | None = None) -> Strategy:
    """Instantiate a strategy by config name, validating hyperparameter keys."""
    from .base import Finetune, Joint

    classes = {
        "finetune": Finetune,
        "joint": Joint,
        "ewc": EWC,
        "online_ewc": OnlineEWC,
        "lwf": LwF,
        "icarl": ICaRL,
        "agem": AGEM,
        "cope": CoPE,
    }
    if name not in classes:
        raise ValueError(f"unknown strategy '{name}' (have {sorted(classes)})")
    defaults = dict(STRATEGY_DEFAULTS[name])
    params = params or {}
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"unknown hyperparameters {sorted(unknown)} for strategy '{name}'")
    defaults.update(params)
    return classes[name](**defaults)
