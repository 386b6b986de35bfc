"""Capacity-bounded, class-balanced exemplar storage.

One class serves both roles a run needs: the replay memory interleaved
with the current task's data (``capacity_balanced`` policy, greedy
class-balanced sampling) and the evaluation memory used to retrain the
output layer (``per_class_quota`` policy, a fixed number of labeled pairs
per class). Memories store example indices plus a label snapshot, never
pixels; images resolve through the dataset they are bound to.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .data import ArrayDataset, LabeledExample
from .errors import ConfigurationError, ProtocolError

logger = logging.getLogger(__name__)

POLICIES = ("capacity_balanced", "per_class_quota")


class ExemplarMemory:
    """Class-keyed store of (index, label) references with a balance policy."""

    def __init__(
        self,
        capacity: Optional[int] = None,
        policy: str = "capacity_balanced",
        per_class_quota: Optional[int] = None,
        seed: int = 0,
        dataset: Optional[ArrayDataset] = None,
    ):
        if policy not in POLICIES:
            raise ConfigurationError(f"unknown policy {policy!r}")
        if policy == "capacity_balanced":
            if capacity is None or capacity < 1:
                raise ConfigurationError("capacity_balanced needs capacity >= 1")
        if policy == "per_class_quota":
            if per_class_quota is None or per_class_quota < 1:
                raise ConfigurationError("per_class_quota needs a quota >= 1")
        self.capacity = capacity
        self.policy = policy
        self.per_class_quota = per_class_quota
        self.seed = int(seed)
        self.slots: Dict[int, List[Tuple[int, int]]] = {}
        self.known_classes: set = set()
        self.dataset = dataset
        self._op_count = 0
        self._cycle: List[Tuple[int, int]] = []
        self._cycle_pos = 0

    # -- basic accounting ---------------------------------------------------

    def __len__(self) -> int:
        return sum(len(v) for v in self.slots.values())

    def class_counts(self) -> Dict[int, int]:
        return {c: len(v) for c, v in self.slots.items()}

    @property
    def is_full(self) -> bool:
        return self.capacity is not None and len(self) >= self.capacity

    def bind(self, dataset: ArrayDataset) -> "ExemplarMemory":
        """Attach the dataset that stored indices resolve against."""
        self.dataset = dataset
        return self

    def clone(self) -> "ExemplarMemory":
        """Independent copy; mutating either side never affects the other."""
        dup = copy.copy(self)
        dup.slots = {c: list(v) for c, v in self.slots.items()}
        dup.known_classes = set(self.known_classes)
        dup._cycle = []
        dup._cycle_pos = 0
        return dup

    def _next_rng(self) -> np.random.Generator:
        # One generator per mutating operation, derived from (seed, op count),
        # so a reloaded manifest continues with identical draws.
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, self._op_count]))
        self._op_count += 1
        return rng

    def _invalidate_cycle(self) -> None:
        self._cycle = []
        self._cycle_pos = 0

    # -- greedy class-balanced sampler (replay memory) ----------------------

    def greedy_update(self, stream: Iterable[LabeledExample]) -> "ExemplarMemory":
        """Feed a stream of labeled examples through the greedy sampler.

        While below capacity every example is admitted. Once full, an
        incoming example of class ``c`` is admitted only when ``c`` holds
        fewer than ceil(capacity / known classes) slots, and admission
        evicts a random element of a currently-largest class, pulling the
        per-class counts toward the <=1 balance band.
        """
        if self.policy != "capacity_balanced":
            raise ProtocolError("greedy_update requires the capacity_balanced policy")
        rng = self._next_rng()
        for ex in stream:
            label = ex.label
            if label is None or label < 0:
                logger.warning("greedy_update: rejected example with class %r", label)
                continue
            label = int(label)
            self.known_classes.add(label)
            slot = self.slots.setdefault(label, [])
            if len(self) < self.capacity:
                slot.append((int(ex.index), label))
                continue
            quota = math.ceil(self.capacity / len(self.known_classes))
            if len(slot) >= quota:
                continue
            counts = self.class_counts()
            top = max(counts.values())
            largest = sorted(c for c, n in counts.items() if n == top)
            victim_class = int(largest[rng.integers(len(largest))])
            victim_pos = int(rng.integers(len(self.slots[victim_class])))
            self.slots[victim_class].pop(victim_pos)
            if not self.slots[victim_class]:
                del self.slots[victim_class]
            slot = self.slots.setdefault(label, [])
            slot.append((int(ex.index), label))
        self._invalidate_cycle()
        return self

    # -- fixed per-class quota (evaluation memory) ---------------------------

    def quota_update(
        self,
        task_dataset: ArrayDataset,
        per_class_quota: Optional[int] = None,
    ) -> "ExemplarMemory":
        """Add min(quota, available) uniformly sampled pairs per new class.

        Classes already stored are left untouched. Requires labels even
        when the continual trainer itself ran unsupervised.
        """
        if self.policy != "per_class_quota":
            raise ProtocolError("quota_update requires the per_class_quota policy")
        if task_dataset.labels is None:
            raise ProtocolError(
                "evaluation memory needs labeled pairs; got an unlabeled dataset")
        quota = per_class_quota or self.per_class_quota
        rng = self._next_rng()
        for c in sorted(int(c) for c in np.unique(task_dataset.labels)):
            if c in self.slots:
                continue
            positions = task_dataset.positions_of_class(c)
            take = min(quota, len(positions))
            chosen = rng.choice(len(positions), size=take, replace=False)
            self.slots[c] = [
                (int(task_dataset.indices[positions[p]]), c)
                for p in sorted(int(i) for i in chosen)
            ]
            self.known_classes.add(c)
        self._invalidate_cycle()
        return self

    # -- sampling ------------------------------------------------------------

    def _rebuild_cycle(self, rng: np.random.Generator) -> None:
        # Interleave per-class shuffled queues round-robin so any batch
        # window is near class-balanced and one cycle covers every stored
        # example exactly once.
        queues = {}
        for c in sorted(self.slots):
            q = list(self.slots[c])
            rng.shuffle(q)
            queues[c] = q
        order = sorted(queues)
        cycle: List[Tuple[int, int]] = []
        while queues:
            for c in list(order):
                if c in queues:
                    cycle.append(queues[c].pop())
                    if not queues[c]:
                        del queues[c]
            order = order[1:] + order[:1]
        self._cycle = cycle
        self._cycle_pos = 0

    def balanced_batch(
        self,
        batch_size: int,
        rng: np.random.Generator,
    ) -> List[LabeledExample]:
        """Next batch of a without-replacement, class-interleaved cycle.

        One full cycle visits every stored example exactly once, so
        per-class counts over a cycle equal the slot sizes. The tail batch
        of a cycle may be short; asking for more than the store holds
        returns everything, shuffled.
        """
        if len(self) == 0:
            raise ProtocolError("memory is empty")
        if self.dataset is None:
            raise ProtocolError("memory is not bound to a dataset")
        if batch_size >= len(self) and not self._cycle_pos:
            refs = [ref for c in sorted(self.slots) for ref in self.slots[c]]
            rng.shuffle(refs)
            return [self.dataset.by_index(ix) for ix, _ in refs]
        if self._cycle_pos >= len(self._cycle):
            self._rebuild_cycle(rng)
        take = self._cycle[self._cycle_pos:self._cycle_pos + batch_size]
        self._cycle_pos += len(take)
        return [self.dataset.by_index(ix) for ix, _ in take]

    def all_examples(self) -> List[LabeledExample]:
        if self.dataset is None:
            raise ProtocolError("memory is not bound to a dataset")
        return [self.dataset.by_index(ix)
                for c in sorted(self.slots) for ix, _ in self.slots[c]]

    def stored_labels(self) -> List[int]:
        return [lab for c in sorted(self.slots) for _, lab in self.slots[c]]

    # -- manifests ------------------------------------------------------------

    def to_manifest(self) -> dict:
        return {
            "policy": self.policy,
            "capacity": self.capacity,
            "per_class_quota": self.per_class_quota,
            "seed": self.seed,
            "op_count": self._op_count,
            "slots": {str(c): [[ix, lab] for ix, lab in v]
                      for c, v in sorted(self.slots.items())},
            "known_classes": sorted(self.known_classes),
        }

    def save_manifest(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_manifest(), f, sort_keys=True, indent=1)

    @classmethod
    def from_manifest(
        cls,
        manifest,
        dataset: Optional[ArrayDataset] = None,
    ) -> "ExemplarMemory":
        """Rebuild a memory exactly as serialized (contents and rng position)."""
        if isinstance(manifest, str):
            with open(manifest) as f:
                manifest = json.load(f)
        mem = cls(
            capacity=manifest["capacity"],
            policy=manifest["policy"],
            per_class_quota=manifest["per_class_quota"],
            seed=manifest["seed"],
            dataset=dataset,
        )
        mem.slots = {int(c): [(int(ix), int(lab)) for ix, lab in v]
                     for c, v in manifest["slots"].items()}
        mem.known_classes = set(manifest["known_classes"])
        mem._op_count = manifest["op_count"]
        return mem


def greedy_update(memory: ExemplarMemory, stream) -> ExemplarMemory:
    return memory.greedy_update(stream)


def quota_update(memory: ExemplarMemory, task_dataset, per_class_quota=None):
    return memory.quota_update(task_dataset, per_class_quota)


def balanced_batch(memory: ExemplarMemory, batch_size: int, rng):
    return memory.balanced_batch(batch_size, rng)
