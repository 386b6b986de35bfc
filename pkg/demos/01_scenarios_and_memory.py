"""Walk through scenario construction and the two exemplar memories.

Builds the three incremental-learning scenarios over a synthetic dataset,
shows the sequence manifests, and exercises the greedy class-balanced
replay memory next to the fixed-quota evaluation memory.

Run:  python demos/01_scenarios_and_memory.py
"""
import numpy as np

from crlbench import (
    ExemplarMemory,
    build_class_il,
    build_data_il,
    build_task_il,
    cumulative_test_set,
    make_synthetic_dataset,
)

# A 10-class desk-scale dataset of oriented color gratings.
source = make_synthetic_dataset(num_classes=10, train_per_class=50,
                                test_per_class=10, image_size=16, seed=0)
print(f"dataset: {source.name}, {len(source.train)} train / "
      f"{len(source.test)} test images of shape {source.train.image_shape}")

# --- class-incremental: disjoint classes, shared output layer ------------
seq = build_class_il(source, task_sizes=[2] * 5, seed=42)
print("\nclass_il class sets per task:")
for task in seq.tasks:
    print(f"  task {task.spec.task_id}: classes {task.spec.class_set}, "
          f"{len(task.train)} train examples")

# The cumulative test set after task t covers every class seen so far.
for t in (1, 3, 5):
    cum = cumulative_test_set(seq, t)
    print(f"  cumulative test at t={t}: {len(cum)} examples, "
          f"{len(set(int(l) for l in cum.labels))} classes")

# --- task-incremental: same splits, task ids available at test time ------
seq_task = build_task_il(source, task_sizes=[2] * 5, seed=42)
print(f"\ntask_il uses the same partition, mode={seq_task.mode}")

# --- data-incremental: every task sees all classes, data split evenly ----
seq_data = build_data_il(source, num_tasks=5, seed=42)
counts = [int((seq_data.tasks[0].train.labels == c).sum()) for c in range(10)]
print(f"data_il task 1 per-class counts: {counts} (balanced by construction)")

# --- replay memory: greedy class-balanced sampler -------------------------
replay = ExemplarMemory(capacity=30, seed=7).bind(source.train)
for task in seq.tasks:
    replay.greedy_update(iter(task.train))
    print(f"after task {task.spec.task_id}: replay holds "
          f"{dict(sorted(replay.class_counts().items()))}")

# Counts stay within a +-1 band of each other once the memory is full.
counts = list(replay.class_counts().values())
assert max(counts) - min(counts) <= 1

# --- evaluation memory: fixed labeled quota per class ---------------------
probe_mem = ExemplarMemory(policy="per_class_quota", per_class_quota=5,
                           seed=7).bind(source.train)
for task in seq.tasks:
    probe_mem.quota_update(task.train)
print(f"\nevaluation memory: {len(probe_mem)} exemplars "
      f"({probe_mem.per_class_quota} per class)")

# Class-balanced batches cycle through the store without replacement.
rng = np.random.default_rng(0)
batch = probe_mem.balanced_batch(10, rng)
print("one balanced batch of labels:", sorted(ex.label for ex in batch))
