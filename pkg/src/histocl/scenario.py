"""Experience-stream builders for the four incremental-learning scenarios.

A stream is an ordered list of experiences, each carrying its own train /
val / test datasets. Membership is decided first (by random batch, domain,
or class group); each experience's data is then split with the given
:class:`~histocl.data.SplitSpec`, so every experience owns disjoint train and
test material.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import Dataset, SplitSpec, partition_near_equal, split
from .errors import (
    InsufficientDataError,
    LabelSpaceMismatchError,
    MissingDomainError,
    PlanMismatchError,
)

SCENARIO_KINDS = ("data_il", "domain_il", "class_il", "task_il")


@dataclass
class Experience:
    """One batch of sequentially arriving data with its evaluation sets."""

    index: int
    train: Dataset
    test: Dataset
    val: Dataset | None = None
    task_id: int | None = None
    classes_present: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if len(self.train) == 0 or len(self.test) == 0:
            raise ValueError(f"experience {self.index} has an empty train or test set")
        present = frozenset(p.class_id for p in self.train)
        if not self.classes_present:
            self.classes_present = present
        elif self.classes_present != present:
            raise ValueError("classes_present does not match the train labels")


@dataclass
class ExperienceStream:
    scenario_kind: str
    experiences: list[Experience]
    task_id_at_test: bool
    class_names: list[str]

    def __post_init__(self) -> None:
        if self.scenario_kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.scenario_kind}")
        if self.task_id_at_test != (self.scenario_kind == "task_il"):
            raise ValueError("task_id_at_test must hold exactly for task_il")
        if self.scenario_kind in ("class_il", "task_il"):
            seen: set[int] = set()
            for e in self.experiences:
                if seen & e.classes_present:
                    raise ValueError("class groups must be pairwise disjoint")
                seen |= e.classes_present
        else:
            full = frozenset(range(len(self.class_names)))
            for e in self.experiences:
                if e.classes_present != full:
                    raise ValueError(
                        f"experience {e.index} misses classes "
                        f"{sorted(full - e.classes_present)} in {self.scenario_kind}"
                    )

    def __len__(self) -> int:
        return len(self.experiences)

    def manifest(self) -> dict:
        """Sizes, classes and domains per experience, for the pre-run JSON dump."""
        return {
            "scenario_kind": self.scenario_kind,
            "task_id_at_test": self.task_id_at_test,
            "class_names": self.class_names,
            "experiences": [
                {
                    "index": e.index,
                    "train_size": len(e.train),
                    "val_size": 0 if e.val is None else len(e.val),
                    "test_size": len(e.test),
                    "classes": sorted(e.classes_present),
                    "domains": sorted(e.train.domain_ids()),
                    "task_id": e.task_id,
                }
                for e in self.experiences
            ],
        }


@dataclass(frozen=True)
class ClassPlan:
    """A class presentation order plus consecutive group sizes."""

    order: tuple[int, ...]
    grouping: tuple[int, ...]

    def __post_init__(self) -> None:
        if sorted(self.order) != list(range(len(self.order))):
            raise PlanMismatchError(f"order {self.order} is not a permutation of 0..n-1")
        if any(g < 1 for g in self.grouping) or sum(self.grouping) != len(self.order):
            raise PlanMismatchError(
                f"grouping {self.grouping} must be positive and sum to {len(self.order)}"
            )

    @classmethod
    def from_strings(cls, order: str, grouping: str) -> "ClassPlan":
        """Parse digit strings like order "182736945", grouping "2223".

        Order digits are 1-based class labels. Comma-separated multi-digit
        forms ("1,8,2", "10,5") are accepted for wider label spaces.
        """
        osep = order.split(",") if "," in order else list(order)
        gsep = grouping.split(",") if "," in grouping else list(grouping)
        return cls(tuple(int(t) - 1 for t in osep), tuple(int(t) for t in gsep))

    @classmethod
    def identity(cls, n_classes: int, grouping: Sequence[int] | None = None) -> "ClassPlan":
        return cls(tuple(range(n_classes)), tuple(grouping or (n_classes,)))

    def groups(self) -> list[list[int]]:
        out = []
        pos = 0
        for g in self.grouping:
            out.append(list(self.order[pos : pos + g]))
            pos += g
        return out


def _split3(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset | None, Dataset]:
    train, val, test = split(ds, spec)
    return train, (val if len(val) else None), test


def build_data_il(
    ds: Dataset,
    n_experiences: int = 5,
    seed: int = 0,
    split_spec: SplitSpec = SplitSpec(),
) -> ExperienceStream:
    """Random batches stratified jointly by (class, domain)."""
    domains = sorted(ds.domain_ids())
    if len(domains) == 0 or any(p.domain_id is None for p in ds.patches):
        raise MissingDomainError("data_il needs domain ids on every patch")
    cells: dict[tuple[int, int], list[int]] = {}
    for i, p in enumerate(ds.patches):
        cells.setdefault((p.class_id, p.domain_id), []).append(i)

    members: list[list[int]] = [[] for _ in range(n_experiences)]
    for (cid, did), idx in sorted(cells.items()):
        if len(idx) < n_experiences:
            raise InsufficientDataError(
                f"(class {cid}, domain {did}) holds {len(idx)} items, "
                f"fewer than {n_experiences} experiences"
            )
        rng = np.random.default_rng((seed, cid, did))
        for k, part in enumerate(partition_near_equal(len(idx), n_experiences, rng)):
            members[k].extend(idx[j] for j in part)

    experiences = []
    for k, m in enumerate(members):
        train, val, test = _split3(ds.subset(sorted(m)), split_spec)
        experiences.append(Experience(index=k, train=train, val=val, test=test))
    return ExperienceStream("data_il", experiences, False, list(ds.class_names))


def build_domain_il(
    ds: Dataset,
    order: Sequence[int] = (1, 2, 3, 4, 5),
    split_spec: SplitSpec = SplitSpec(),
) -> ExperienceStream:
    """One experience per domain, in the given order."""
    present = ds.domain_ids()
    missing = [d for d in order if d not in present]
    if missing:
        raise MissingDomainError(f"domains {missing} absent from dataset (has {sorted(present)})")
    experiences = []
    for k, did in enumerate(order):
        idx = [i for i, p in enumerate(ds.patches) if p.domain_id == did]
        train, val, test = _split3(ds.subset(idx), split_spec)
        experiences.append(Experience(index=k, train=train, val=val, test=test))
    return ExperienceStream("domain_il", experiences, False, list(ds.class_names))


def build_class_il(
    ds: Dataset,
    plan: ClassPlan,
    split_spec: SplitSpec = SplitSpec(),
) -> ExperienceStream:
    """One experience per class group; all domains of a class arrive together."""
    if len(plan.order) != ds.n_classes:
        raise PlanMismatchError(
            f"plan covers {len(plan.order)} classes, dataset has {ds.n_classes}"
        )
    experiences = []
    for k, group in enumerate(plan.groups()):
        gset = set(group)
        idx = [i for i, p in enumerate(ds.patches) if p.class_id in gset]
        if not idx:
            raise PlanMismatchError(f"class group {group} matches no data")
        train, val, test = _split3(ds.subset(idx), split_spec)
        experiences.append(Experience(index=k, train=train, val=val, test=test))
    return ExperienceStream("class_il", experiences, False, list(ds.class_names))


def build_task_il(
    ds: Dataset,
    plan: ClassPlan,
    split_spec: SplitSpec = SplitSpec(),
) -> ExperienceStream:
    """Class-incremental groups with task ids attached to every patch."""
    base = build_class_il(ds, plan, split_spec)

    def tag(d: Dataset | None, k: int) -> Dataset | None:
        if d is None:
            return None
        return Dataset(
            [replace(p, task_id=k) for p in d.patches], list(d.class_names), dict(d.metadata)
        )

    experiences = [
        Experience(
            index=e.index,
            train=tag(e.train, e.index),
            val=tag(e.val, e.index),
            test=tag(e.test, e.index),
            task_id=e.index,
        )
        for e in base.experiences
    ]
    return ExperienceStream("task_il", experiences, True, list(ds.class_names))


TWO_TUMOR_CLASS_NAMES = ["normal", "tumor"]


def harmonize_binary(ds: Dataset, tumor_class: str = "tumor") -> Dataset:
    """Map a dataset onto the shared {normal, tumor} label space.

    Datasets already labeled {normal, tumor} are remapped directly; wider
    label spaces are binarized as ``tumor_class`` vs everything else.
    """
    names = ds.class_names
    if sorted(names) == TWO_TUMOR_CLASS_NAMES and len(names) == 2:
        mapping = {names.index("normal"): 0, names.index("tumor"): 1}
    elif tumor_class in names:
        tumor_id = names.index(tumor_class)
        mapping = {c: (1 if c == tumor_id else 0) for c in range(len(names))}
    else:
        raise LabelSpaceMismatchError(
            f"cannot harmonize classes {names}: no '{tumor_class}' class"
        )
    patches = [replace(p, class_id=mapping[p.class_id]) for p in ds.patches]
    return Dataset(patches, list(TWO_TUMOR_CLASS_NAMES), dict(ds.metadata))


def _stratified_subsample(ds: Dataset, n: int, rng: np.random.Generator) -> Dataset:
    if n >= len(ds):
        return ds
    from .data import allocate_counts

    counts = [len(ds.class_indices(c)) for c in range(ds.n_classes)]
    targets = allocate_counts(n, [c / len(ds) for c in counts])
    targets = [min(t, c) for t, c in zip(targets, counts)]
    deficit = n - sum(targets)
    while deficit > 0:  # rounding may clamp a class; top up where capacity remains
        spare = [c for c in range(ds.n_classes) if targets[c] < counts[c]]
        targets[spare[0]] += 1
        deficit -= 1
    picked: list[int] = []
    for c in range(ds.n_classes):
        idx = np.asarray(ds.class_indices(c))
        picked.extend(idx[rng.permutation(len(idx))[: targets[c]]].tolist())
    return ds.subset(sorted(picked))


def build_two_tumor_domain_il(
    ds_a: Dataset,
    ds_b: Dataset,
    order: str = "a_first",
    volume_ratio: float = 1.0,
    seed: int = 0,
    split_spec: SplitSpec = SplitSpec(),
    tumor_class: str = "tumor",
) -> ExperienceStream:
    """Two-experience domain-incremental stream over two tumor datasets.

    Both datasets are harmonized to {normal, tumor}; the second experience is
    sized to ``volume_ratio`` times the first by stratified subsampling of
    whichever side is over budget. Each tumor type is tagged as one domain.
    """
    if order not in ("a_first", "b_first"):
        raise ValueError("order must be 'a_first' or 'b_first'")
    if volume_ratio <= 0:
        raise ValueError("volume_ratio must be positive")
    a = harmonize_binary(ds_a, tumor_class)
    b = harmonize_binary(ds_b, tumor_class)
    first, second = (a, b) if order == "a_first" else (b, a)

    n_first = min(len(first), int(len(second) / volume_ratio))
    n_second = min(len(second), int(round(n_first * volume_ratio)))
    # subsample rngs keyed by dataset identity so swapping the order swaps
    # the experience contents exactly (at ratio 1)
    rng_first = np.random.default_rng((seed, 0 if order == "a_first" else 1))
    rng_second = np.random.default_rng((seed, 1 if order == "a_first" else 0))
    first = _stratified_subsample(first, n_first, rng_first)
    second = _stratified_subsample(second, n_second, rng_second)

    def tag_domain(d: Dataset, did: int) -> Dataset:
        return Dataset(
            [replace(p, domain_id=did) for p in d.patches], list(d.class_names), dict(d.metadata)
        )

    experiences = []
    for k, part in enumerate((tag_domain(first, 1), tag_domain(second, 2))):
        train, val, test = _split3(part, split_spec)
        experiences.append(Experience(index=k, train=train, val=val, test=test))
    return ExperienceStream("domain_il", experiences, False, list(TWO_TUMOR_CLASS_NAMES))
