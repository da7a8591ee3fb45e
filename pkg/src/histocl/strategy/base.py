"""Strategy hook protocol, training context, and the two baselines.

A strategy wraps the training loop with five hooks plus a classifier mode:

* ``on_experience_start(k, train_ds)`` may swap the training data (joint
  training concatenates, rehearsal mixes in stored exemplars);
* ``extend_batch(batch)`` may graft replay items onto a minibatch;
* ``loss_terms(batch)`` declares the step's loss;
* ``transform_gradient(grads)`` may project or rescale the gradient;
* ``on_step_end(batch, output)`` and ``on_experience_end(k)`` update any
  strategy state (buffers, anchors, prototypes).

All hooks are total: the defaults are identity/no-ops, so plain finetuning
is the base class itself. Strategy state is owned by a single training loop
and never shared across runs.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data import Dataset, Patch, concat_datasets
from ..nncore import (
    CrossEntropy,
    LossTerm,
    ModelSpec,
    ParamVector,
    as_batch,
    forward,
    loss_and_backward,
)


def rng_for(seed: int, tag: str, *indices: int) -> np.random.Generator:
    """A generator keyed by (seed, purpose tag, indices).

    Separate tags keep consumers (batch shuffling, Fisher sampling, buffer
    filling, replay draws) on independent streams, so a strategy that skips
    one draw cannot desynchronize the others.
    """
    return np.random.default_rng((seed, zlib.crc32(tag.encode("ascii")), *indices))


@dataclass
class Batch:
    """One training minibatch with head-local integer labels."""

    x: np.ndarray
    labels: np.ndarray
    patches: list[Patch]
    head_id: int
    new_count: int = -1  # patches[:new_count] came from the stream, the rest is replay

    def __post_init__(self) -> None:
        if self.new_count < 0:
            self.new_count = len(self.patches)


class TrainContext:
    """Mutable loop state shared with strategy hooks.

    Exposes the live parameters, the model spec, per-purpose RNGs, the label
    bookkeeping for heads, and helpers to run forward/backward passes at the
    current (or any frozen) parameters.
    """

    def __init__(
        self,
        spec: ModelSpec,
        params: ParamVector,
        seed: int,
        batch_size: int,
        single_head: bool,
        dtype: type = np.float32,
    ) -> None:
        self.spec = spec
        self.params = params
        self.seed = seed
        self.batch_size = batch_size
        self.single_head = single_head
        self.dtype = dtype
        self.experience_index = -1
        self.global_step = 0
        self.classes_seen: set[int] = set()
        self.classes_seen_before: set[int] = set()
        # per-head global class ids in output order
        self.head_classes: dict[int, list[int]] = {}

    def rng(self, tag: str, *indices: int) -> np.random.Generator:
        return rng_for(self.seed, tag, *indices)

    def begin_experience(self, k: int, classes_present: frozenset[int], head_id: int) -> None:
        self.experience_index = k
        self.classes_seen_before = set(self.classes_seen)
        self.classes_seen |= classes_present

    def head_for(self, patch: Patch) -> int:
        if self.single_head:
            return 0
        if patch.task_id is None:
            raise ValueError("multi-head model needs task ids on patches")
        return patch.task_id

    def local_label(self, patch: Patch) -> int:
        classes = self.head_classes[self.head_for(patch)]
        return classes.index(patch.class_id)

    def head_output_indices(self, head_id: int, class_ids: Sequence[int]) -> np.ndarray:
        classes = self.head_classes[head_id]
        return np.asarray([classes.index(c) for c in class_ids], dtype=np.int64)

    def make_batch(self, patches: Sequence[Patch], head_id: int) -> Batch:
        x = as_batch(patches, self.spec.input_side)
        labels = np.asarray([self.local_label(p) for p in patches], dtype=np.int64)
        return Batch(x=x, labels=labels, patches=list(patches), head_id=head_id)

    def features_of(
        self, patches: Sequence[Patch], params: ParamVector | None = None
    ) -> np.ndarray:
        """Feature embeddings under the given (default: current) parameters."""
        params = params or self.params
        out = []
        head_id = self.spec.heads[0][0]
        for start in range(0, len(patches), 256):
            chunk = patches[start : start + 256]
            x = as_batch(chunk, self.spec.input_side)
            out.append(forward(params, self.spec, x, head_id, dtype=self.dtype).features)
        return np.concatenate(out, axis=0)

    def logits_of(
        self, x: np.ndarray, head_id: int, params: ParamVector | None = None
    ) -> np.ndarray:
        params = params or self.params
        return forward(params, self.spec, x, head_id, dtype=self.dtype).logits

    def ce_gradient(self, patches: Sequence[Patch]) -> np.ndarray:
        """Mean cross-entropy gradient over patches, grouped by head."""
        by_head: dict[int, list[Patch]] = {}
        for p in patches:
            by_head.setdefault(self.head_for(p), []).append(p)
        total = np.zeros_like(self.params.values, dtype=np.float64)
        n = len(patches)
        for head_id, group in sorted(by_head.items()):
            batch = self.make_batch(group, head_id)
            _, grads = loss_and_backward(
                self.params, self.spec, batch.x, head_id, [CrossEntropy(batch.labels)],
                dtype=self.dtype,
            )
            total += (len(group) / n) * grads.astype(np.float64)
        return total.astype(self.dtype)


@dataclass
class Strategy:
    """Plain finetuning: cross-entropy on the current experience only."""

    name: str = "finetune"
    classifier_mode: str = "head"  # head | nearest_mean_of_exemplars | prototypes
    forced_regime: str | None = None
    ctx: TrainContext | None = field(default=None, repr=False)

    def bind(self, ctx: TrainContext) -> None:
        self.ctx = ctx

    def on_experience_start(self, k: int, train_ds: Dataset) -> Dataset:
        return train_ds

    def extend_batch(self, batch: Batch) -> Batch:
        return batch

    def loss_terms(self, batch: Batch) -> list[LossTerm]:
        return [CrossEntropy(batch.labels)]

    def transform_gradient(self, grads: np.ndarray) -> np.ndarray:
        return grads

    def on_step_end(self, batch: Batch, output) -> None:
        pass

    def on_experience_end(self, k: int) -> None:
        pass


class Finetune(Strategy):
    def __init__(self) -> None:
        super().__init__(name="finetune")


class Joint(Strategy):
    """Upper-bound baseline: experience k trains on all data seen so far."""

    def __init__(self) -> None:
        super().__init__(name="joint")
        self._pool: Dataset | None = None

    def on_experience_start(self, k: int, train_ds: Dataset) -> Dataset:
        self._pool = train_ds if self._pool is None else concat_datasets(self._pool, train_ds)
        return self._pool
