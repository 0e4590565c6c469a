"""Dataset-size-aware task sampling for homogeneous batches.

Each batch comes from a single task; the task is drawn from a softmax over
dataset-size proportions, which flattens the raw size imbalance and
up-weights small datasets relative to proportional sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

BALANCED = "balanced"          # exp(size proportion), normalized
PROPORTIONAL = "proportional"  # raw size proportions (random-sample ablation)
INVERSE = "inverse"            # weights proportional to 1/size
SCHEMES = (BALANCED, PROPORTIONAL, INVERSE)


def compute_weights(sizes: Sequence[int], scheme: str = BALANCED) -> np.ndarray:
    """Sampling weights over tasks from their dataset sizes."""
    if len(sizes) == 0:
        raise ValueError("empty task registry")
    sizes_arr = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes_arr < 1):
        raise ValueError("dataset sizes must be >= 1")
    if scheme == BALANCED:
        w = np.exp(sizes_arr / sizes_arr.sum())
    elif scheme == PROPORTIONAL:
        w = sizes_arr.copy()
    elif scheme == INVERSE:
        w = 1.0 / sizes_arr
    else:
        raise ValueError(f"unknown sampling scheme '{scheme}'")
    return w / w.sum()


@dataclass
class TaskEntry:
    task_id: int
    name: str
    dataset: list[Any]

    @property
    def size(self) -> int:
        return len(self.dataset)


@dataclass
class TaskRegistry:
    """Registered tasks, their datasets, and the derived sampling weights."""
    scheme: str = BALANCED
    tasks: list[TaskEntry] = field(default_factory=list)
    weights: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def add_task(self, name: str, dataset: list[Any]) -> TaskEntry:
        if not dataset:
            raise ValueError(f"task '{name}' has an empty dataset")
        entry = TaskEntry(task_id=len(self.tasks), name=name, dataset=list(dataset))
        self.tasks.append(entry)
        self._recompute()
        return entry

    def _recompute(self) -> None:
        self.weights = compute_weights([t.size for t in self.tasks], self.scheme)

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def sizes(self) -> list[int]:
        return [t.size for t in self.tasks]

    def next_batch(self, batch_size: int, rng: np.random.Generator) -> tuple[int, list[Any]]:
        """Draw one task from the weights, then `batch_size` samples uniformly
        with replacement from that task's dataset (homogeneous batch)."""
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.tasks:
            raise ValueError("empty task registry")
        task_id = int(rng.choice(self.num_tasks, p=self.weights))
        dataset = self.tasks[task_id].dataset
        idx = rng.integers(0, len(dataset), size=batch_size)
        return task_id, [dataset[i] for i in idx]
