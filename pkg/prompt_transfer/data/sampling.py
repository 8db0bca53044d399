from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from prompt_transfer.modelling.numerics import Rng

__all__ = [
    "DEFAULT_MIXING_CAP", "MixingSpec", "BatchManifest",
    "stochastic_task_subset", "proportional_batch", "make_source_batches", "write_manifests",
]

DEFAULT_MIXING_CAP = 2 ** 15


@dataclass
class MixingSpec:
    sizes: Dict[str, int]
    cap: int = DEFAULT_MIXING_CAP

    def __post_init__(self):
        if self.cap < 1:
            raise ValueError(f"mixing cap {self.cap} must be >= 1")
        for task_id, n in self.sizes.items():
            if n < 1:
                raise ValueError(f"task {task_id}: size {n} must be >= 1")

    @property
    def task_ids(self) -> List[str]:
        return list(self.sizes.keys())

    def rates(self, allowed: Sequence[str]) -> np.ndarray:
        unknown = [t for t in allowed if t not in self.sizes]
        if unknown:
            raise KeyError(f"tasks {unknown} not in mixing spec")
        capped = np.array([min(self.sizes[t], self.cap) for t in allowed], dtype=np.float64)
        return capped / capped.sum()


@dataclass
class BatchManifest:
    entries: List[Tuple[str, int]]
    batch_size: int
    seed: int
    allowed: List[str] = field(default_factory=list)

    def by_task(self) -> "OrderedDict[str, List[int]]":
        """Example indices grouped per task, tasks in order of first appearance."""
        grouped: "OrderedDict[str, List[int]]" = OrderedDict()
        for task_id, idx in self.entries:
            grouped.setdefault(task_id, []).append(idx)
        return grouped

    def to_line(self, batch_idx: int) -> str:
        return "%d\t%s" % (batch_idx, ",".join(f"{t}:{i}" for t, i in self.entries))


def stochastic_task_subset(task_ids: Sequence[str], rng: Rng) -> Tuple[int, List[str]]:
    """K uniform on {2..kappa}, then K distinct tasks uniformly without replacement."""
    kappa = len(task_ids)
    if kappa < 2:
        raise ValueError(f"stochastic task sampling needs kappa >= 2 tasks, got {kappa}")
    k = int(rng.integers(2, kappa + 1))
    chosen = rng.choice(kappa, size=k, replace=False)
    return k, [task_ids[int(i)] for i in chosen]


def proportional_batch(spec: MixingSpec, allowed: Sequence[str], batch_size: int, rng: Rng) -> BatchManifest:
    if not allowed:
        raise ValueError("proportional_batch: empty task set")
    if batch_size < 1:
        raise ValueError(f"proportional_batch: batch_size={batch_size} must be >= 1")
    allowed = list(allowed)
    slots = rng.choice(len(allowed), size=batch_size, replace=True, p=spec.rates(allowed))
    entries = []
    for s in slots:
        task_id = allowed[int(s)]
        entries.append((task_id, int(rng.integers(0, spec.sizes[task_id]))))
    return BatchManifest(entries=entries, batch_size=batch_size, seed=rng.seed, allowed=allowed)


def make_source_batches(
        spec: MixingSpec,
        batch_size: int,
        steps: int,
        rng: Rng,
        stochastic: bool = True,
        kappa_tasks: Optional[Sequence[str]] = None,
) -> Iterator[BatchManifest]:
    tasks = list(kappa_tasks) if kappa_tasks is not None else spec.task_ids
    for step in range(steps):
        step_rng = rng.fork("batch", step)
        if stochastic and len(tasks) >= 2:
            _, allowed = stochastic_task_subset(tasks, step_rng.fork("subset"))
        else:
            allowed = tasks
        yield proportional_batch(spec, allowed, batch_size, step_rng.fork("slots"))


def write_manifests(path: str, manifests: Sequence[BatchManifest]):
    with open(path, "w") as f:
        for i, m in enumerate(manifests):
            f.write(m.to_line(i) + "\n")
