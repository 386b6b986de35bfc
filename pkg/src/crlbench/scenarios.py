"""Task sequence construction for the three incremental-learning scenarios.

``class_il`` and ``task_il`` partition a seeded permutation of the classes
into disjoint per-task class sets; ``data_il`` gives every task the full
class set and splits each class's examples as evenly as possible across
tasks. Construction is deterministic given (dataset, sizes, seed) and each
sequence serializes to a JSON manifest that is the reproducibility
contract for a run.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data import ArrayDataset, SourceDataset, concat_datasets
from .errors import ConfigurationError
from .seeding import stream_rng

MODES = ("class_il", "task_il", "data_il")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int            # 1-based position in the sequence
    class_set: Tuple[int, ...]
    mode: str
    supervised: bool = True


@dataclass
class Task:
    spec: TaskSpec
    train: ArrayDataset
    test: ArrayDataset

    def trainer_view(self) -> ArrayDataset:
        """Train split as the trainer may see it (labels hidden if unsupervised)."""
        return self.train if self.spec.supervised else self.train.unlabeled()


@dataclass
class TaskSequence:
    tasks: List[Task]
    seed: int
    sequence_name: str
    mode: str
    source_name: str
    num_classes: int
    class_order: Tuple[int, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def task_class_sets(self) -> List[Tuple[int, ...]]:
        return [t.spec.class_set for t in self.tasks]

    def classes_through(self, t: int) -> List[int]:
        """Classes introduced up to and including task t, in introduction order."""
        seen: List[int] = []
        for task in self.tasks[:t]:
            for c in task.spec.class_set:
                if c not in seen:
                    seen.append(c)
        return seen

    def manifest(self) -> dict:
        return {
            "sequence_name": self.sequence_name,
            "mode": self.mode,
            "seed": self.seed,
            "source": self.source_name,
            "num_classes": self.num_classes,
            "class_order": list(self.class_order),
            "supervised": self.tasks[0].spec.supervised if self.tasks else True,
            "tasks": [
                {
                    "task_id": task.spec.task_id,
                    "class_set": list(task.spec.class_set),
                    "train_indices": [int(i) for i in task.train.indices],
                    "test_indices": [int(i) for i in task.test.indices],
                }
                for task in self.tasks
            ],
        }

    def manifest_json(self) -> str:
        return json.dumps(self.manifest(), sort_keys=True, indent=1)

    def save_manifest(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.manifest_json())


def _check_sizes(task_sizes: Sequence[int], num_classes: int) -> None:
    if not task_sizes:
        raise ConfigurationError("task_sizes is empty")
    if any(s < 1 for s in task_sizes):
        raise ConfigurationError("every task needs at least one class")
    if sum(task_sizes) > num_classes:
        raise ConfigurationError(
            f"task_sizes sum to {sum(task_sizes)} but only "
            f"{num_classes} classes exist")


def _split_by_owner(split: ArrayDataset, owner_of_class: dict) -> dict:
    """positions per task id, each class routed to the task owning it."""
    per_task: dict = {}
    for pos in range(len(split)):
        owner = owner_of_class.get(int(split.labels[pos]))
        if owner is None:
            continue
        per_task.setdefault(owner, []).append(pos)
    return per_task


def build_class_il(
    source: SourceDataset,
    task_sizes: Sequence[int],
    seed: int,
    mode: str = "class_il",
    supervised: bool = True,
    sequence_name: Optional[str] = None,
) -> TaskSequence:
    """Disjoint-class sequence: permute classes by seed, partition in order.

    Every train and test example of a used class lands in exactly the task
    owning its class. Classes beyond ``sum(task_sizes)`` are left out of
    the sequence entirely.
    """
    if mode not in ("class_il", "task_il"):
        raise ConfigurationError(f"mode must be class_il or task_il, got {mode!r}")
    _check_sizes(task_sizes, source.num_classes)
    rng = stream_rng(seed, "scenario")
    order = [int(c) for c in rng.permutation(source.num_classes)]

    class_sets: List[Tuple[int, ...]] = []
    cursor = 0
    for size in task_sizes:
        class_sets.append(tuple(order[cursor:cursor + size]))
        cursor += size
    owner = {c: t for t, cs in enumerate(class_sets) for c in cs}

    train_pos = _split_by_owner(source.train, owner)
    test_pos = _split_by_owner(source.test, owner)
    tasks = []
    for t, class_set in enumerate(class_sets):
        spec = TaskSpec(t + 1, class_set, mode, supervised)
        tasks.append(Task(
            spec,
            source.train.subset(train_pos.get(t, []), name=f"task{t + 1}/train"),
            source.test.subset(test_pos.get(t, []), name=f"task{t + 1}/test"),
        ))
    name = sequence_name or f"{len(task_sizes)}-Tasks"
    return TaskSequence(tasks, seed, name, mode, source.name,
                        source.num_classes, tuple(order))


def build_task_il(source, task_sizes, seed, supervised=True, sequence_name=None):
    return build_class_il(source, task_sizes, seed, mode="task_il",
                          supervised=supervised, sequence_name=sequence_name)


def build_data_il(
    source: SourceDataset,
    num_tasks: int,
    seed: int,
    supervised: bool = True,
    sequence_name: Optional[str] = None,
) -> TaskSequence:
    """Even per-class split of the whole dataset across ``num_tasks`` tasks.

    Shuffling is stratified per class so per-task counts of each class
    differ by at most one. Every task's class set is the full class set.
    """
    if num_tasks < 1:
        raise ConfigurationError("num_tasks must be >= 1")
    rng = stream_rng(seed, "scenario")

    def split_positions(split: ArrayDataset, enforce: bool) -> List[np.ndarray]:
        chunks: List[List[int]] = [[] for _ in range(num_tasks)]
        for c in range(split.num_classes):
            pos = split.positions_of_class(c)
            if enforce and len(pos) < num_tasks:
                raise ConfigurationError(
                    f"class {c} has {len(pos)} examples, fewer than "
                    f"{num_tasks} tasks")
            pos = pos[rng.permutation(len(pos))]
            for t, part in enumerate(np.array_split(pos, num_tasks)):
                chunks[t].extend(int(p) for p in part)
        return [np.array(sorted(ch), dtype=np.int64) for ch in chunks]

    train_chunks = split_positions(source.train, enforce=True)
    test_chunks = split_positions(source.test, enforce=False)
    all_classes = tuple(range(source.num_classes))
    tasks = []
    for t in range(num_tasks):
        spec = TaskSpec(t + 1, all_classes, "data_il", supervised)
        tasks.append(Task(
            spec,
            source.train.subset(train_chunks[t], name=f"task{t + 1}/train"),
            source.test.subset(test_chunks[t], name=f"task{t + 1}/test"),
        ))
    name = sequence_name or f"{num_tasks}-Tasks-data"
    return TaskSequence(tasks, seed, name, "data_il", source.name,
                        source.num_classes, all_classes)


def cumulative_test_set(sequence: TaskSequence, t: int) -> ArrayDataset:
    """Evaluation set after task t: union of test splits seen so far.

    Under data_il this is always the full test set, matching how such runs
    are scored at every step.
    """
    if not 1 <= t <= len(sequence):
        raise ValueError(f"t={t} outside [1, {len(sequence)}]")
    if sequence.mode == "data_il":
        parts = [task.test for task in sequence.tasks]
    else:
        parts = [task.test for task in sequence.tasks[:t]]
    return concat_datasets(parts, name=f"cumulative-test-t{t}")
