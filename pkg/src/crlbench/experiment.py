"""Run orchestration: configs, the per-task pipeline, persistence, resume.

A run executes, for every task in its sequence: train, ingest the task
into the replay and evaluation memories, checkpoint, retrain the output
layer on the evaluation memory, evaluate raw and retrained accuracy plus
the task-confusion profile, optionally score downstream transfer, and
commit everything atomically so an interrupted run resumes from the last
committed task with byte-identical metrics.
"""
from __future__ import annotations

import csv
import io
import json
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .data import SourceDataset, load_image_folder, make_synthetic_dataset
from .errors import ConfigurationError
from .evaluation import (
    EvalReport,
    ProbeConfig,
    TransferConfig,
    bias_profile,
    downstream_transfer,
    evaluate_accuracy,
    newest_task_mass,
    retrain_output_layer,
)
from .memory import ExemplarMemory
from .models import ModelState, encoder_checksum, load_checkpoint, save_checkpoint
from .scenarios import TaskSequence, build_class_il, build_data_il, cumulative_test_set
from .seeding import stream_seed
from .training import (
    AlgorithmSpec,
    RegularizerState,
    TrainConfig,
    gdumb_learner,
    joint_learner,
    train_task,
)

DATA_ROOT_ENV = "CRLBENCH_DATA_ROOT"


@dataclass
class DatasetConfig:
    kind: str = "synthetic"        # synthetic | image_folder
    name: str = "synthetic"
    root: Optional[str] = None     # image_folder only
    num_classes: int = 10
    train_per_class: int = 100
    test_per_class: int = 20
    image_size: int = 16
    family: str = "gratings"
    generator_seed: int = 0


@dataclass
class ScenarioConfig:
    mode: str = "class_il"                   # class_il | task_il | data_il
    task_sizes: Optional[List[int]] = None   # class_il / task_il
    num_tasks: Optional[int] = None          # data_il
    supervised: bool = True
    sequence_name: Optional[str] = None


@dataclass
class ExperimentConfig:
    """Everything one run needs; round-trips losslessly through JSON."""

    run_id: str
    output_dir: str
    seed: int = 0
    device: str = "cpu"
    architecture: str = "small"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    memory_size: int = 0                     # replay memory capacity; 0 = none
    eval_quota: int = 20                     # per-class quota of the eval memory
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    transfer: TransferConfig = field(default_factory=TransferConfig)
    downstream: List[DatasetConfig] = field(default_factory=list)
    downstream_schedule: str = "none"        # none | final | all
    replay_update: str = "streaming"         # streaming | end_of_task

    def validate(self) -> "ExperimentConfig":
        self.algorithm.validate()
        if self.scenario.mode not in ("class_il", "task_il", "data_il"):
            raise ConfigurationError(f"unknown mode {self.scenario.mode!r}")
        if self.scenario.mode == "data_il" and not self.scenario.num_tasks:
            raise ConfigurationError("data_il needs num_tasks")
        if self.scenario.mode != "data_il" and not self.scenario.task_sizes:
            raise ConfigurationError(f"{self.scenario.mode} needs task_sizes")
        if not self.scenario.supervised and self.algorithm.objective != "moco":
            raise ConfigurationError(
                "unsupervised scenarios require the moco objective")
        if self.algorithm.learner == "gdumb" and self.memory_size < 1:
            raise ConfigurationError("the memory-only learner needs memory_size >= 1")
        if self.downstream_schedule not in ("none", "final", "all"):
            raise ConfigurationError(
                f"unknown downstream schedule {self.downstream_schedule!r}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["dataset"] = DatasetConfig(**d.get("dataset", {}))
        d["scenario"] = ScenarioConfig(**d.get("scenario", {}))
        d["algorithm"] = AlgorithmSpec.from_dict(d.get("algorithm", {}))
        d["probe"] = ProbeConfig(**d.get("probe", {}))
        d["transfer"] = TransferConfig(**d.get("transfer", {}))
        d["downstream"] = [DatasetConfig(**x) for x in d.get("downstream", [])]
        return cls(**d).validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_file(cls, path: str) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())


def resolve_dataset(cfg: DatasetConfig) -> SourceDataset:
    if cfg.kind == "synthetic":
        return make_synthetic_dataset(
            num_classes=cfg.num_classes,
            train_per_class=cfg.train_per_class,
            test_per_class=cfg.test_per_class,
            image_size=cfg.image_size,
            seed=cfg.generator_seed,
            family=cfg.family,
            name=cfg.name,
        )
    if cfg.kind == "image_folder":
        root = os.environ.get(DATA_ROOT_ENV) or cfg.root
        if not root:
            raise ConfigurationError(
                f"image_folder dataset needs a root (or ${DATA_ROOT_ENV})")
        return load_image_folder(root, name=cfg.name)
    raise ConfigurationError(f"unknown dataset kind {cfg.kind!r}")


def build_sequence(config: ExperimentConfig, source: SourceDataset) -> TaskSequence:
    sc = config.scenario
    if sc.mode == "data_il":
        return build_data_il(source, sc.num_tasks, config.seed,
                             supervised=sc.supervised,
                             sequence_name=sc.sequence_name)
    return build_class_il(source, sc.task_sizes, config.seed, mode=sc.mode,
                          supervised=sc.supervised,
                          sequence_name=sc.sequence_name)


# ---------------------------------------------------------------------------
# Ledger
# ---------------------------------------------------------------------------

@dataclass
class RunLedger:
    run_id: str
    run_dir: str
    total_tasks: int
    completed_tasks: int = 0
    status: str = "running"
    wall_clock: float = 0.0
    task_records: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def load(cls, run_dir: str) -> "RunLedger":
        with open(os.path.join(run_dir, "ledger.json")) as f:
            return cls(**json.load(f))

    def commit(self) -> None:
        path = os.path.join(self.run_dir, "ledger.json")
        tmp = path + ".tmp"
        with open(tmp, "w") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=1)
        os.replace(tmp, path)

    def reports(self) -> List[EvalReport]:
        out = []
        for t in range(1, self.completed_tasks + 1):
            with open(os.path.join(self.run_dir, "reports", f"eval_t{t:02d}.json")) as f:
                out.append(EvalReport.from_json(f.read()))
        return out


METRIC_COLUMNS = ["run_id", "t", "algorithm", "mode", "seed", "raw_acc",
                  "gd_acc", "bias_gap", "newest_mass_raw", "newest_mass_gd"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _write_metrics_csv(run_dir: str, config: ExperimentConfig,
                       reports: Sequence[EvalReport]) -> None:
    downstream_names = [d.name for d in config.downstream]
    columns = METRIC_COLUMNS + [f"downstream_{n}" for n in downstream_names]
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(columns)
    for rep in reports:
        row = [
            config.run_id, rep.task_index, config.algorithm.label(),
            config.scenario.mode, config.seed,
            _fmt(rep.raw_accuracy), _fmt(rep.gd_accuracy), _fmt(rep.bias_gap),
            _fmt(newest_task_mass(np.array(rep.task_confusion))
                 if rep.task_confusion is not None else None),
            _fmt(newest_task_mass(np.array(rep.task_confusion_gd))
                 if rep.task_confusion_gd is not None else None),
        ]
        row += [_fmt(rep.downstream.get(n)) for n in downstream_names]
        writer.writerow(row)
    path = os.path.join(run_dir, "metrics.csv")
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as f:
        f.write(buf.getvalue())
    os.replace(tmp, path)


def _config_diff(stored: dict, given: dict, prefix: str = "") -> List[str]:
    lines = []
    keys = sorted(set(stored) | set(given))
    for k in keys:
        a, b = stored.get(k), given.get(k)
        if isinstance(a, dict) and isinstance(b, dict):
            lines += _config_diff(a, b, prefix=f"{prefix}{k}.")
        elif a != b:
            lines.append(f"{prefix}{k}: stored={a!r} given={b!r}")
    return lines


# ---------------------------------------------------------------------------
# The run loop
# ---------------------------------------------------------------------------

def run_experiment(
    config: ExperimentConfig,
    resume: bool = False,
    stop_after_task: Optional[int] = None,
) -> RunLedger:
    """Execute (or resume) one experiment and return its ledger.

    ``stop_after_task`` ends the run cleanly after committing that task,
    which is how the tests exercise crash/resume equivalence.
    """
    config.validate()
    run_dir = os.path.join(config.output_dir, config.run_id)
    config_path = os.path.join(run_dir, "config.json")

    if resume:
        if not os.path.exists(config_path):
            raise ConfigurationError(f"nothing to resume in {run_dir}")
        with open(config_path) as f:
            stored = json.load(f)
        diff = _config_diff(stored, config.to_dict())
        if diff:
            raise ConfigurationError(
                "resume config does not match the stored one:\n  "
                + "\n  ".join(diff))
        ledger = RunLedger.load(run_dir)
        if ledger.status == "complete":
            return ledger
    else:
        if os.path.exists(os.path.join(run_dir, "ledger.json")):
            raise ConfigurationError(
                f"run directory {run_dir} already holds a run; pass resume")
        for sub in ("checkpoints", "reports", "memories", "losses"):
            os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
        config.save(config_path)
        ledger = None

    source = resolve_dataset(config.dataset)
    sequence = build_sequence(config, source)
    sequence.save_manifest(os.path.join(run_dir, "sequence_manifest.json"))
    downstream_sources = [resolve_dataset(d) for d in config.downstream]

    memory_e = None
    if config.memory_size > 0:
        memory_e = ExemplarMemory(
            capacity=config.memory_size, policy="capacity_balanced",
            seed=stream_seed(config.seed, "memory", 0)).bind(source.train)
    memory_o = ExemplarMemory(
        policy="per_class_quota", per_class_quota=config.eval_quota,
        seed=stream_seed(config.seed, "memory", 1)).bind(source.train)

    train_cfg = TrainConfig(device=config.device,
                            replay_update=config.replay_update)
    model: Optional[ModelState] = None
    reg_state: Optional[RegularizerState] = None

    if ledger is None:
        ledger = RunLedger(config.run_id, run_dir, total_tasks=len(sequence))
        start_t = 1
    else:
        start_t = ledger.completed_tasks + 1
        if start_t > 1:
            model, reg_state, memory_e, memory_o = _restore(
                config, run_dir, ledger.completed_tasks, source, memory_e,
                memory_o)

    reports = ledger.reports()
    started = time.monotonic()

    os.makedirs(os.path.join(run_dir, "losses"), exist_ok=True)
    for t in range(start_t, len(sequence) + 1):
        task = sequence.tasks[t - 1]
        class_sets = sequence.task_class_sets[:t]
        spec = config.algorithm
        train_cfg.loss_log_path = os.path.join(run_dir, "losses",
                                               f"task_{t:02d}.csv")

        if spec.learner == "incremental":
            model, reg_state = _train_incremental(
                model, task, memory_e, spec, train_cfg, config, reg_state,
                class_sets)
        elif spec.learner == "joint":
            model = joint_learner(sequence.tasks[:t], config.architecture,
                                  spec, train_cfg,
                                  stream_seed(config.seed, "init", t))
        else:  # gdumb
            memory_e.greedy_update(iter(task.train))
            model = gdumb_learner(memory_e, config.architecture, spec,
                                  train_cfg, stream_seed(config.seed, "init", t))

        memory_o.quota_update(task.train, config.eval_quota)
        checksum_post_train = encoder_checksum(model.encoder)

        rep = _evaluate_task(config, sequence, t, model, memory_o,
                             downstream_sources)
        checksum_post_eval = encoder_checksum(model.encoder)
        if checksum_post_eval != checksum_post_train:
            raise RuntimeError("encoder changed during evaluation")

        _commit_task(config, run_dir, t, model, reg_state, memory_e, memory_o,
                     rep, reports, ledger, checksum_post_train,
                     checksum_post_eval, started)

        if stop_after_task is not None and t >= stop_after_task:
            return ledger

    ledger.status = "complete"
    ledger.wall_clock = time.monotonic() - started
    ledger.commit()
    return ledger


def _train_incremental(model, task, memory_e, spec, train_cfg, config,
                       reg_state, class_sets):
    from .models import build_encoder

    if model is None:
        torch.manual_seed(stream_seed(config.seed, "init"))
        in_channels = task.train.images.shape[-1]
        model = ModelState(build_encoder(config.architecture, in_channels))
    return train_task(model, task, memory_e, spec, train_cfg, config.seed,
                      reg_state=reg_state, task_class_sets=class_sets)


def _evaluate_task(config, sequence, t, model, memory_o, downstream_sources):
    mode = sequence.mode
    device = config.device
    cumulative = cumulative_test_set(sequence, t)
    class_sets = sequence.task_class_sets[:t]

    probe_head = retrain_output_layer(
        model.encoder, memory_o, config.probe,
        seed=stream_seed(config.seed, "probe", t), device=device,
        expected_classes=sorted({int(l) for l in cumulative.labels}))

    gd_acc = evaluate_accuracy(model.encoder, probe_head, cumulative, mode=mode,
                               task_class_sets=class_sets, device=device)
    raw_acc = None
    confusion_raw = None
    if model.head is not None:
        raw_acc = evaluate_accuracy(model.encoder, model.head, cumulative,
                                    mode=mode, task_class_sets=class_sets,
                                    device=device)
        if mode == "class_il":
            confusion_raw = bias_profile(model.encoder, model.head, cumulative,
                                         class_sets, device=device).tolist()
    confusion_gd = None
    if mode == "class_il":
        confusion_gd = bias_profile(model.encoder, probe_head, cumulative,
                                    class_sets, device=device).tolist()

    downstream: Dict[str, float] = {}
    schedule = config.downstream_schedule
    if downstream_sources and (
            schedule == "all" or (schedule == "final" and t == len(sequence))):
        for ds in downstream_sources:
            downstream[ds.name] = downstream_transfer(
                model.encoder, ds, config.transfer,
                seed=stream_seed(config.seed, "transfer", t), device=device)

    bias_gap = None if raw_acc is None else gd_acc - raw_acc
    return EvalReport(
        task_index=t, gd_accuracy=gd_acc, raw_accuracy=raw_acc,
        bias_gap=bias_gap, task_confusion=confusion_raw,
        task_confusion_gd=confusion_gd, downstream=downstream,
        scenario=f"{config.dataset.name}/{mode}/{sequence.sequence_name}",
        seed=config.seed)


def _commit_task(config, run_dir, t, model, reg_state, memory_e, memory_o,
                 rep, reports, ledger, checksum_post_train, checksum_post_eval,
                 started):
    extra = {}
    if reg_state is not None and reg_state.importance is not None:
        extra["importance"] = reg_state.importance
    save_checkpoint(os.path.join(run_dir, "checkpoints", f"task_{t:02d}.pt"),
                    model, t, extra=extra)
    if memory_e is not None:
        memory_e.save_manifest(
            os.path.join(run_dir, "memories", f"replay_t{t:02d}.json"))
    memory_o.save_manifest(
        os.path.join(run_dir, "memories", f"eval_t{t:02d}.json"))
    rep.save(os.path.join(run_dir, "reports", f"eval_t{t:02d}.json"))
    reports.append(rep)
    _write_metrics_csv(run_dir, config, reports)
    ledger.completed_tasks = t
    ledger.wall_clock = time.monotonic() - started
    ledger.task_records.append({
        "task": t,
        "encoder_checksum_post_train": checksum_post_train,
        "encoder_checksum_post_eval": checksum_post_eval,
    })
    ledger.commit()


def _restore(config, run_dir, completed, source, memory_e, memory_o):
    """Rebuild trainer state from the last committed task."""
    model, extra = load_checkpoint(
        os.path.join(run_dir, "checkpoints", f"task_{completed:02d}.pt"))
    for mod in model.modules().values():
        mod.to(config.device)
    spec = config.algorithm
    anchor = {n: p.detach().clone()
              for n, p in _named_params_of(model).items()}
    frozen = None
    if spec.regularizer in ("lwf_kd", "ird") or spec.classifier_strategy == "ssil":
        frozen = model.eval_clone()
    reg_state = RegularizerState(anchor, extra.get("importance"), frozen)
    if memory_e is not None:
        memory_e = ExemplarMemory.from_manifest(
            os.path.join(run_dir, "memories", f"replay_t{completed:02d}.json"),
            dataset=source.train)
    memory_o = ExemplarMemory.from_manifest(
        os.path.join(run_dir, "memories", f"eval_t{completed:02d}.json"),
        dataset=source.train)
    return model, reg_state, memory_e, memory_o


def _named_params_of(model: ModelState):
    out = {}
    for prefix, mod in model.modules().items():
        for name, p in mod.named_parameters():
            out[f"{prefix}.{name}"] = p
    return out
