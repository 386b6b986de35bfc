"""The core measurement: how much apparent forgetting is just head bias.

Finetunes a model through a 5-task class-incremental sequence, then
compares raw accuracy (the biased head the run produced) against accuracy
after retraining only the output layer on a small class-balanced memory,
with the task-confusion profile before and after.

Run:  python demos/03_bias_gap_walkthrough.py   (about a minute on CPU)
"""
import numpy as np
import torch

from crlbench import (
    AlgorithmSpec,
    ExemplarMemory,
    ModelState,
    ProbeConfig,
    TrainConfig,
    bias_profile,
    build_class_il,
    build_encoder,
    cumulative_test_set,
    evaluate_accuracy,
    make_synthetic_dataset,
    newest_task_mass,
    retrain_output_layer,
    train_task,
)
from crlbench.seeding import stream_seed

SEED = 0
source = make_synthetic_dataset(num_classes=10, train_per_class=60,
                                test_per_class=15, image_size=16, seed=1)
sequence = build_class_il(source, task_sizes=[2] * 5, seed=SEED)

spec = AlgorithmSpec(epochs=6, batch_size=32, memory_batch_size=16, lr=0.05)
config = TrainConfig()
replay = ExemplarMemory(capacity=20, seed=SEED).bind(source.train)
probe_mem = ExemplarMemory(policy="per_class_quota", per_class_quota=20,
                           seed=SEED).bind(source.train)

torch.manual_seed(stream_seed(SEED, "init"))
model = ModelState(build_encoder("micro"))
reg = None
for t, task in enumerate(sequence.tasks, 1):
    model, reg = train_task(model, task, replay, spec, config, SEED,
                            reg_state=reg,
                            task_class_sets=sequence.task_class_sets[:t])
    probe_mem.quota_update(task.train)
    print(f"trained task {t}: classes {task.spec.class_set}, "
          f"replay={dict(sorted(replay.class_counts().items()))}")

cumulative = cumulative_test_set(sequence, len(sequence))
raw = evaluate_accuracy(model.encoder, model.head, cumulative)

probe_head = retrain_output_layer(model.encoder, probe_mem,
                                  ProbeConfig(epochs=150, lr=0.1), seed=SEED)
retrained = evaluate_accuracy(model.encoder, probe_head, cumulative)

print(f"\nraw accuracy over all 10 classes:        {raw:.3f}")
print(f"after output-layer retraining:           {retrained:.3f}")
print(f"bias gap (representation was this much better than the head showed): "
      f"{retrained - raw:+.3f}")

conf_raw = bias_profile(model.encoder, model.head, cumulative,
                        sequence.task_class_sets)
conf_gd = bias_profile(model.encoder, probe_head, cumulative,
                       sequence.task_class_sets)
np.set_printoptions(precision=2, suppress=True)
print("\ntask-confusion profile of the raw head (rows: true task):")
print(conf_raw)
print(f"mass older tasks route to the newest task: "
      f"{newest_task_mass(conf_raw):.2f}")
print("\nafter retraining the output layer:")
print(conf_gd)
print(f"mass older tasks route to the newest task: "
      f"{newest_task_mass(conf_gd):.2f}")
