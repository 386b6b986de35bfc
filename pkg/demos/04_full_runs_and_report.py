"""End-to-end: configured runs, the run directory layout, and reports.

Executes two small experiments through the harness (plain finetuning with
and without replay memory), shows the artifacts a run leaves behind,
resumes an interrupted run, and emits the comparison report.

Run:  python demos/04_full_runs_and_report.py   (a few minutes on CPU)
"""
import os
import tempfile

from crlbench import (
    AlgorithmSpec,
    DatasetConfig,
    ExperimentConfig,
    ProbeConfig,
    ScenarioConfig,
    TransferConfig,
    emit_report,
    run_experiment,
)

workdir = tempfile.mkdtemp(prefix="crlbench_demo_")
dataset = DatasetConfig(num_classes=10, train_per_class=40, test_per_class=10,
                        image_size=16, generator_seed=0, name="demo")


def config(run_id, memory_size):
    return ExperimentConfig(
        run_id=run_id,
        output_dir=os.path.join(workdir, "runs"),
        seed=0,
        architecture="micro",   # keep the demo snappy on CPU
        dataset=dataset,
        scenario=ScenarioConfig(mode="class_il", task_sizes=[2] * 5),
        algorithm=AlgorithmSpec(epochs=4, batch_size=32,
                                memory_batch_size=16 if memory_size else 0),
        memory_size=memory_size,
        eval_quota=10,
        probe=ProbeConfig(epochs=100, lr=0.1),
        transfer=TransferConfig(),
        downstream=[DatasetConfig(num_classes=5, train_per_class=10,
                                  test_per_class=10, image_size=16,
                                  generator_seed=99, name="held_out")],
        downstream_schedule="final",
    )


print("running finetuning without replay memory...")
ledger_a = run_experiment(config("ft_ce_m0", memory_size=0))
print("running finetuning with a 20-exemplar replay memory...")
ledger_b = run_experiment(config("ft_ce_m20", memory_size=20), stop_after_task=3)
print(f"second run stopped after task {ledger_b.completed_tasks}; resuming...")
ledger_b = run_experiment(config("ft_ce_m20", memory_size=20), resume=True)

print("\nper-task metrics of the replay run:")
for rep in ledger_b.reports():
    print(f"  t={rep.task_index}: raw={rep.raw_accuracy:.3f} "
          f"gd={rep.gd_accuracy:.3f} gap={rep.bias_gap:+.3f}")

run_dir = ledger_b.run_dir
print("\nartifacts under", run_dir)
for name in sorted(os.listdir(run_dir)):
    print("  ", name)

report_dir = os.path.join(workdir, "report")
written = emit_report([ledger_a.run_dir, ledger_b.run_dir], report_dir)
print("\nreport files:")
for path in written:
    print("  ", path)
print("\nthe same report is available from the command line:")
print(f"  crlbench report --runs '{os.path.join(workdir, 'runs', '*')}' "
      f"--out {report_dir}")
