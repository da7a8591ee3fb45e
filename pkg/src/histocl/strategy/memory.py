"""Memory structures for rehearsal methods: herding store, reservoir buffers,
prototype store."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import Patch
from ..errors import DegeneratePrototypeError


def herding_select(features: np.ndarray, m: int) -> list[int]:
    """Greedy exemplar order: each pick keeps the running mean nearest the
    class mean.

    ``features`` are L2-normalized rows. At step k the candidate x minimizing
    ``|| mu - (phi(x) + sum of picked) / k ||`` joins the selection; ties go
    to the lowest index. Returns ``min(m, n)`` distinct indices; truncating
    the result to any prefix equals running the selection with that smaller m.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or len(f) < 1:
        raise ValueError("features must be a non-empty (n, d) array")
    if m < 1:
        raise ValueError("m must be >= 1")
    mu = f.mean(axis=0)
    n = len(f)
    picked: list[int] = []
    running = np.zeros(f.shape[1])
    taken = np.zeros(n, dtype=bool)
    for k in range(1, min(m, n) + 1):
        cand = (running + f) / k
        d2 = ((cand - mu) ** 2).sum(axis=1)
        d2[taken] = np.inf
        j = int(np.argmin(d2))  # argmin returns the first minimum: lowest index wins
        picked.append(j)
        taken[j] = True
        running += f[j]
    return picked


class ExemplarMemory:
    """Budgeted per-class exemplar lists kept in herding order."""

    def __init__(self, budget: int) -> None:
        if budget < 0:
            raise ValueError("budget must be >= 0")
        self.budget = budget
        self.per_class: dict[int, list[Patch]] = {}

    def total(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def classes(self) -> list[int]:
        return sorted(self.per_class)

    def all_patches(self) -> list[Patch]:
        out: list[Patch] = []
        for c in self.classes():
            out.extend(self.per_class[c])
        return out

    def truncate(self, m: int) -> None:
        for c in list(self.per_class):
            self.per_class[c] = self.per_class[c][:m]

    def store(self, class_id: int, patches: list[Patch]) -> None:
        keys = [p.source_key for p in patches]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate source keys in exemplar list for class {class_id}")
        self.per_class[class_id] = list(patches)

    def check_budget(self) -> None:
        if self.total() > self.budget:
            raise AssertionError(f"exemplar memory holds {self.total()} > budget {self.budget}")


class EpisodicBuffer:
    """Fixed-capacity uniform reservoir over everything ever offered."""

    def __init__(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.slots: list[Patch] = []
        self.seen = 0

    def __len__(self) -> int:
        return len(self.slots)

    def add(self, item: Patch, rng: np.random.Generator) -> None:
        if self.capacity == 0:
            return
        if len(self.slots) < self.capacity:
            self.slots.append(item)
        else:
            j = int(rng.integers(0, self.seen + 1))
            if j < self.capacity:
                self.slots[j] = item
        self.seen += 1

    def sample(self, n: int, rng: np.random.Generator) -> list[Patch]:
        if not self.slots:
            return []
        take = min(n, len(self.slots))
        idx = rng.choice(len(self.slots), size=take, replace=False)
        return [self.slots[int(i)] for i in idx]


class BalancedBuffer:
    """Capacity shared evenly across seen classes, reservoir per class.

    Quotas are ``capacity // n_classes`` with the remainder spread over the
    lowest class ids, so filled classes never differ by more than one item;
    a class with fewer arrivals than its quota simply holds all of them.
    When a new class appears, quotas shrink and over-quota lists drop their
    tail.
    """

    def __init__(self, capacity: int) -> None:
        if capacity < 0:
            raise ValueError("capacity must be >= 0")
        self.capacity = capacity
        self.per_class: dict[int, list[Patch]] = {}
        self.seen: dict[int, int] = {}

    def __len__(self) -> int:
        return sum(len(v) for v in self.per_class.values())

    def counts(self) -> dict[int, int]:
        return {c: len(v) for c, v in self.per_class.items()}

    def quota(self, class_id: int) -> int:
        classes = sorted(self.per_class)
        base, extra = divmod(self.capacity, len(classes))
        rank = classes.index(class_id)
        return base + (1 if rank < extra else 0)

    def add(self, item: Patch, class_id: int, rng: np.random.Generator) -> None:
        if self.capacity == 0:
            return
        if class_id not in self.per_class:
            self.per_class[class_id] = []
            self.seen[class_id] = 0
            for c in self.per_class:
                self.per_class[c] = self.per_class[c][: self.quota(c)]
        q = self.quota(class_id)
        slots = self.per_class[class_id]
        if len(slots) < q:
            slots.append(item)
        else:
            j = int(rng.integers(0, self.seen[class_id] + 1))
            if j < q:
                slots[j] = item
        self.seen[class_id] += 1

    def sample(self, n: int, rng: np.random.Generator) -> list[Patch]:
        pool: list[Patch] = []
        for c in sorted(self.per_class):
            pool.extend(self.per_class[c])
        if not pool:
            return []
        take = min(n, len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        return [pool[int(i)] for i in idx]


def update_prototype(p: np.ndarray, batch_mean: np.ndarray, alpha: float) -> np.ndarray:
    """Exponential prototype update, renormalized to the unit sphere.

    ``p' = normalize(alpha * p + (1 - alpha) * batch_mean)``.
    """
    p = np.asarray(p, dtype=np.float64)
    if abs(np.linalg.norm(p) - 1.0) > 1e-5:
        raise ValueError("prototype must be unit length")
    v = alpha * p + (1.0 - alpha) * np.asarray(batch_mean, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-8:
        raise DegeneratePrototypeError("prototype update collapsed to zero norm")
    return v / n


@dataclass
class PrototypeStore:
    """Unit-norm class prototypes with momentum updates.

    ``max_norm_deviation`` tracks the worst |norm - 1| observed right after
    any update over the store's lifetime.
    """

    dim: int
    alpha: float
    tau: float

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self.prototypes: dict[int, np.ndarray] = {}
        self.max_norm_deviation = 0.0

    def _note_norm(self, class_id: int) -> None:
        dev = abs(float(np.linalg.norm(self.prototypes[class_id])) - 1.0)
        self.max_norm_deviation = max(self.max_norm_deviation, dev)

    def ensure(self, class_id: int, rng: np.random.Generator) -> None:
        if class_id not in self.prototypes:
            v = rng.standard_normal(self.dim)
            self.prototypes[class_id] = v / np.linalg.norm(v)
            self._note_norm(class_id)

    def update(self, class_id: int, batch_mean: np.ndarray) -> None:
        self.prototypes[class_id] = update_prototype(
            self.prototypes[class_id], batch_mean, self.alpha
        )
        self._note_norm(class_id)

    def classes(self) -> list[int]:
        return sorted(self.prototypes)

    def matrix(self) -> np.ndarray:
        return np.stack([self.prototypes[c] for c in self.classes()])
