"""Per-task trainers: finetuning, regularized, replay and contrastive variants.

One entry point, :func:`train_task`, runs a single task under an
``AlgorithmSpec`` combining an objective (``ce``, ``supcon``, ``moco``), a
regularizer (``none``, ``mas``, ``lwf_kd``, ``ird``) and a classifier
strategy (``standard``, ``ssil``). Reference learners retrained from
scratch (joint upper bound, memory-only) reuse the same path.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .augment import augment
from .data import ArrayDataset, LabeledExample, concat_datasets
from .errors import ConfigurationError, ProtocolError
from .losses import (
    loss_ce,
    loss_infonce,
    loss_ird,
    loss_supcon,
    mas_importance,
    mas_penalty,
    ssil_separated_ce,
    ssil_task_kd,
    loss_lwf_kd,
)
from .memory import ExemplarMemory
from .models import (
    ContrastiveState,
    ModelState,
    MultiHead,
    ProjectionHead,
    SingleHead,
    batch_to_tensor,
    build_encoder,
    ema_update,
    expand_single_head,
    queue_push,
    refresh_norm_stats,
)
from .scenarios import Task, TaskSpec
from .seeding import stream_rng, stream_seed

OBJECTIVES = ("ce", "supcon", "moco")
REGULARIZERS = ("none", "mas", "lwf_kd", "ird")
STRATEGIES = ("standard", "ssil")
LEARNERS = ("incremental", "joint", "gdumb")


@dataclass
class AlgorithmSpec:
    """Which objective/regularizer combination to run, with hyperparameters."""

    objective: str = "ce"
    regularizer: str = "none"
    classifier_strategy: str = "standard"
    learner: str = "incremental"
    # optimization
    epochs: int = 10
    batch_size: int = 32
    memory_batch_size: int = 16
    lr: float = 0.05
    lr_schedule: str = "cosine"
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    # regularizer and contrastive hyperparameters
    lambda_mas: float = 1.0
    mas_accumulation: float = 1.0
    mas_importance_samples: int = 256
    kd_temperature: float = 2.0
    lambda_kd: float = 1.0
    supcon_temperature: float = 0.1
    ird_tau_current: float = 0.2
    ird_tau_past: float = 0.01
    lambda_ird: float = 1.0
    moco_temperature: float = 0.2
    moco_momentum: float = 0.999
    queue_size: int = 256
    proj_dim: int = 64

    def validate(self) -> "AlgorithmSpec":
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigurationError(f"unknown regularizer {self.regularizer!r}")
        if self.classifier_strategy not in STRATEGIES:
            raise ConfigurationError(
                f"unknown classifier strategy {self.classifier_strategy!r}")
        if self.learner not in LEARNERS:
            raise ConfigurationError(f"unknown learner {self.learner!r}")
        if self.classifier_strategy == "ssil" and self.objective != "ce":
            raise ConfigurationError("ssil requires the ce objective")
        if self.regularizer == "ird" and self.objective != "supcon":
            raise ConfigurationError("ird requires the supcon objective")
        if self.regularizer == "lwf_kd" and self.objective != "ce":
            raise ConfigurationError("logit distillation requires the ce objective")
        return self

    def label(self) -> str:
        if self.learner == "joint":
            return f"joint_{self.objective}"
        if self.learner == "gdumb":
            return "gdumb"
        parts = []
        if self.classifier_strategy == "ssil":
            parts.append("ssil")
        elif self.regularizer != "none":
            parts.append(self.regularizer)
        else:
            parts.append("ft")
        parts.append(self.objective)
        return "_".join(parts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AlgorithmSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown AlgorithmSpec keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TrainConfig:
    """Run-level context a trainer needs beyond the algorithm itself."""

    device: str = "cpu"
    replay_update: str = "streaming"   # when the greedy sampler ingests a task
    loss_log_path: Optional[str] = None


@dataclass
class RegularizerState:
    """What the next task's regularizers need from this task."""

    anchor: Optional[Dict[str, torch.Tensor]] = None
    importance: Optional[Dict[str, torch.Tensor]] = None
    frozen: Optional[ModelState] = None

    def state_dict(self) -> dict:
        return {
            "anchor": self.anchor,
            "importance": self.importance,
            "frozen": ({k: m.state_dict() for k, m in self.frozen.modules().items()}
                       if self.frozen is not None else None),
        }


# ---------------------------------------------------------------------------
# Model preparation
# ---------------------------------------------------------------------------

def prepare_model(
    model: Optional[ModelState],
    task: Task,
    spec: AlgorithmSpec,
    architecture: str = "micro",
    in_channels: int = 3,
) -> ModelState:
    """Create or grow the pieces of the model the task and spec require.

    Single heads grow by the task's new classes (old columns preserved
    bitwise); per-task heads gain one head per task; contrastive
    objectives get a projection head, and moco additionally a momentum
    encoder and warm negative queue.
    """
    if model is None:
        model = ModelState(build_encoder(architecture, in_channels))
    mode = task.spec.mode
    if spec.objective == "ce":
        if mode in ("class_il", "data_il"):
            if model.head is None:
                model.head = SingleHead(model.encoder.embedding_dim,
                                        task.spec.class_set)
            else:
                new = [c for c in task.spec.class_set
                       if c not in model.head.class_ids]
                expand_single_head(model.head, new)
        else:
            if model.head is None:
                model.head = MultiHead(model.encoder.embedding_dim)
            if task.spec.task_id not in model.head.task_classes:
                model.head.add_task(task.spec.task_id, task.spec.class_set)
    else:
        if model.projection is None:
            model.projection = ProjectionHead(model.encoder.embedding_dim,
                                              spec.proj_dim)
        if spec.objective == "moco" and model.contrastive is None:
            model.contrastive = ContrastiveState.create(
                model.encoder, model.projection, spec.queue_size,
                spec.moco_momentum, spec.moco_temperature)
    return model


def _named_params(model: ModelState) -> Dict[str, torch.Tensor]:
    out = {}
    for prefix, mod in model.modules().items():
        for name, p in mod.named_parameters():
            out[f"{prefix}.{name}"] = p
    return out


def _matching(reference: Dict[str, torch.Tensor],
              candidates: Dict[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
    return {n: t for n, t in candidates.items()
            if n in reference and reference[n].shape == t.shape}


class _LogitModel(nn.Module):
    # encoder + single head as one callable, for importance and distillation
    def __init__(self, encoder, head, task_id=None):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.task_id = task_id

    def forward(self, x):
        z = self.encoder(x)
        if self.task_id is not None:
            return self.head(z, self.task_id)
        return self.head(z)


class _ProjModel(nn.Module):
    def __init__(self, encoder, projection):
        super().__init__()
        self.encoder = encoder
        self.projection = projection

    def forward(self, x):
        return self.projection(self.encoder(x))


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------

def _stack_views(examples: List[LabeledExample], policy: str,
                 rng: np.random.Generator, device: str):
    if policy == "contrastive_two_view":
        v1, v2 = zip(*(augment(ex.image, policy, rng) for ex in examples))
        return (batch_to_tensor(np.stack(v1), device),
                batch_to_tensor(np.stack(v2), device))
    views = [augment(ex.image, policy, rng) for ex in examples]
    return batch_to_tensor(np.stack(views), device)


def _labels_tensor(examples: List[LabeledExample], device: str) -> torch.Tensor:
    return torch.tensor([ex.label for ex in examples], dtype=torch.long,
                        device=device)


def _cosine_lr(base_lr: float, step: int, total: int) -> float:
    if total <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / (total - 1)))


# ---------------------------------------------------------------------------
# The trainer
# ---------------------------------------------------------------------------

def train_task(
    model: ModelState,
    task: Task,
    memory: Optional[ExemplarMemory],
    spec: AlgorithmSpec,
    config: TrainConfig,
    seed: int,
    reg_state: Optional[RegularizerState] = None,
    task_class_sets: Optional[Sequence[Sequence[int]]] = None,
) -> Tuple[ModelState, RegularizerState]:
    """Train ``model`` on one task and refresh the regularizer state.

    Replay batches are drawn from a snapshot of ``memory`` taken at task
    start, while the greedy sampler ingests the task's stream into the
    live memory (during the first epoch by default). Deterministic given
    (inputs, seed): every random choice draws from a stream derived from
    ``seed`` and the task id.
    """
    spec.validate()
    mode = task.spec.mode
    if spec.classifier_strategy == "ssil" and mode == "data_il":
        raise ConfigurationError("ssil is undefined when tasks share all classes")
    if spec.classifier_strategy == "ssil" and mode == "task_il":
        raise ConfigurationError("ssil assumes a single shared head")
    if not task.spec.supervised and spec.objective in ("ce", "supcon"):
        raise ConfigurationError(
            f"objective {spec.objective!r} needs labels but the task is unsupervised")
    if spec.regularizer == "lwf_kd" and mode == "task_il":
        raise ConfigurationError("logit distillation here assumes a shared head")

    t = task.spec.task_id
    torch.manual_seed(stream_seed(seed, "torch", t))
    rng_batch = stream_rng(seed, "batching", t)
    rng_aug = stream_rng(seed, "augmentation", t)
    device = config.device
    reg_state = reg_state or RegularizerState()

    prepare_model(model, task, spec, architecture=model.architecture)
    for mod in model.modules().values():
        mod.to(device).train()

    train_view = task.trainer_view()
    replay = memory.clone() if (memory is not None and len(memory) > 0) else None
    streaming = (memory is not None and spec.learner != "gdumb"
                 and config.replay_update == "streaming")

    if task_class_sets is None:
        task_class_sets = [task.spec.class_set]
    boundaries = list(np.cumsum([len(cs) for cs in task_class_sets]))

    params = list(_named_params(model).values())
    opt = torch.optim.SGD(params, lr=spec.lr, momentum=spec.sgd_momentum,
                          weight_decay=spec.weight_decay)

    frozen = reg_state.frozen
    frozen_logit_model = None
    if frozen is not None and frozen.head is not None:
        frozen_logit_model = _LogitModel(frozen.encoder, frozen.head)
    frozen_proj_model = None
    if frozen is not None and frozen.projection is not None:
        frozen_proj_model = _ProjModel(frozen.encoder, frozen.projection)

    steps_per_epoch = max(1, math.ceil(len(train_view) / spec.batch_size))
    total_steps = spec.epochs * steps_per_epoch
    loss_rows: List[Tuple[int, int, float, float, float]] = []
    step = 0

    for epoch in range(spec.epochs):
        order = rng_batch.permutation(len(train_view))
        for start in range(0, len(order), spec.batch_size):
            pos = order[start:start + spec.batch_size]
            current = [train_view[int(p)] for p in pos]
            mem_batch: List[LabeledExample] = []
            if replay is not None and spec.memory_batch_size > 0:
                mem_batch = replay.balanced_batch(spec.memory_batch_size, rng_batch)

            lr = (_cosine_lr(spec.lr, step, total_steps)
                  if spec.lr_schedule == "cosine" else spec.lr)
            for group in opt.param_groups:
                group["lr"] = lr

            loss_main, loss_reg = _batch_loss(
                model, spec, mode, current, mem_batch, boundaries,
                frozen_logit_model, frozen_proj_model, reg_state,
                rng_aug, device, task_id=t)
            loss = loss_main + loss_reg
            opt.zero_grad()
            loss.backward()
            opt.step()

            loss_rows.append((step, t, float(loss.detach()),
                              float(loss_main.detach()), float(loss_reg.detach())))
            if streaming and epoch == 0:
                memory.greedy_update(task.train[int(p)] for p in pos)
            step += 1

    if memory is not None and spec.learner != "gdumb" and not streaming:
        memory.greedy_update(iter(task.train))

    if spec.epochs > 0:
        stat_images = [task.train.images]
        if replay is not None:
            stat_images.append(np.stack([ex.image for ex in replay.all_examples()]))
        refresh_norm_stats(model.encoder, np.concatenate(stat_images),
                           device=device)
        if model.contrastive is not None:
            # key network mirrors the query network's statistics
            ema_update(model.contrastive, model.encoder, model.projection)

    if config.loss_log_path:
        _write_loss_log(config.loss_log_path, loss_rows)

    new_state = _refresh_regularizer_state(model, task, spec, reg_state, device)
    return model, new_state


def _batch_loss(model, spec, mode, current, mem_batch, boundaries,
                frozen_logit_model, frozen_proj_model, reg_state,
                rng_aug, device, task_id):
    if spec.objective == "ce":
        loss_main = _ce_main_loss(model, spec, mode, current, mem_batch,
                                  boundaries, frozen_logit_model, rng_aug,
                                  device, task_id)
        if spec.classifier_strategy == "ssil":
            # _ce_main_loss already folded the task-wise KD term in
            loss_main, loss_reg = loss_main
        else:
            loss_reg = _drift_penalty(model, spec, reg_state)
            if spec.regularizer == "lwf_kd" and frozen_logit_model is not None:
                loss_reg = loss_reg + spec.lambda_kd * _lwf_term(
                    model, current, mem_batch, frozen_logit_model, spec, rng_aug,
                    device)
        return loss_main, loss_reg

    if spec.objective == "supcon":
        examples = current + mem_batch
        v1, v2 = _stack_views(examples, "contrastive_two_view", rng_aug, device)
        x = torch.cat([v1, v2], dim=0)
        z = model.projection(model.encoder(x))
        labels = _labels_tensor(examples, device).repeat(2)
        loss_main = loss_supcon(z, labels, spec.supcon_temperature)
        loss_reg = _drift_penalty(model, spec, reg_state)
        if spec.regularizer == "ird" and frozen_proj_model is not None:
            with torch.no_grad():
                z_past = frozen_proj_model(x)
            loss_reg = loss_reg + spec.lambda_ird * loss_ird(
                z, z_past, spec.ird_tau_current, spec.ird_tau_past)
        return loss_main, loss_reg

    # moco: labels never consulted
    examples = current + mem_batch
    v_q, v_k = _stack_views(examples, "contrastive_two_view", rng_aug, device)
    state = model.contrastive
    ema_update(state, model.encoder, model.projection)
    q = model.projection(model.encoder(v_q))
    state.key_encoder.eval()
    if state.key_projection is not None:
        state.key_projection.eval()
    with torch.no_grad():
        k = state.key_projection(state.key_encoder(v_k))
    # clone: the ring buffer is overwritten in place before backward runs
    negatives = state.negatives().clone()
    loss_main = loss_infonce(q, k, negatives, spec.moco_temperature)
    loss_reg = _drift_penalty(model, spec, reg_state)
    queue_push(state, k)
    return loss_main, loss_reg


def _ce_main_loss(model, spec, mode, current, mem_batch, boundaries,
                  frozen_logit_model, rng_aug, device, task_id):
    if mode == "task_il":
        x = _stack_views(current, "ce_standard", rng_aug, device)
        cols = model.head.column_of(task_id, [ex.label for ex in current]).to(device)
        total = loss_ce(model.head(model.encoder(x), task_id), cols) * len(current)
        count = len(current)
        by_task: Dict[int, List[LabeledExample]] = {}
        for ex in mem_batch:
            owner = _owning_task(model.head, ex.label)
            by_task.setdefault(owner, []).append(ex)
        for owner, group in sorted(by_task.items()):
            gx = _stack_views(group, "ce_standard", rng_aug, device)
            gcols = model.head.column_of(owner, [ex.label for ex in group]).to(device)
            total = total + loss_ce(model.head(model.encoder(gx), owner),
                                    gcols) * len(group)
            count += len(group)
        return total / count

    head: SingleHead = model.head
    if spec.classifier_strategy == "ssil":
        x_cur = _stack_views(current, "ce_standard", rng_aug, device)
        cols_cur = head.column_of(torch.tensor([ex.label for ex in current]))
        if mem_batch:
            x_mem = _stack_views(mem_batch, "ce_standard", rng_aug, device)
            cols_mem = head.column_of(torch.tensor([ex.label for ex in mem_batch]))
            x_all = torch.cat([x_cur, x_mem], dim=0)
        else:
            if len(boundaries) >= 2:
                raise ProtocolError("ssil needs a replay batch once previous tasks exist")
            x_mem, cols_mem = None, None
            x_all = x_cur
        logits_all = head(model.encoder(x_all))
        logits_cur = logits_all[: x_cur.shape[0]]
        logits_mem = logits_all[x_cur.shape[0]:] if x_mem is not None else None
        sep = ssil_separated_ce(logits_cur, cols_cur, logits_mem, cols_mem,
                                boundaries)
        kd = logits_all.new_zeros(())
        if len(boundaries) >= 2:
            if frozen_logit_model is None:
                raise ProtocolError("ssil needs a frozen model once previous tasks exist")
            with torch.no_grad():
                frozen_logits = frozen_logit_model(x_all)
            kd = ssil_task_kd(logits_all[:, : frozen_logits.shape[1]],
                              frozen_logits, boundaries, spec.kd_temperature)
        return sep, kd

    examples = current + mem_batch
    x = _stack_views(examples, "ce_standard", rng_aug, device)
    cols = head.column_of(torch.tensor([ex.label for ex in examples])).to(device)
    return loss_ce(head(model.encoder(x)), cols)


def _lwf_term(model, current, mem_batch, frozen_logit_model, spec, rng_aug, device):
    examples = current + mem_batch
    x = _stack_views(examples, "ce_standard", rng_aug, device)
    logits = model.head(model.encoder(x))
    with torch.no_grad():
        frozen_logits = frozen_logit_model(x)
    old_w = frozen_logits.shape[1]
    return loss_lwf_kd(logits[:, :old_w], frozen_logits, spec.kd_temperature)


def _owning_task(head: MultiHead, label: int) -> int:
    for task_id, classes in head.task_classes.items():
        if label in classes:
            return task_id
    raise ProtocolError(f"class {label} belongs to no trained task")


def _drift_penalty(model, spec, reg_state) -> torch.Tensor:
    zero = torch.zeros((), device=next(model.encoder.parameters()).device)
    if spec.regularizer != "mas" or reg_state.anchor is None:
        return zero
    params = _named_params(model)
    anchor = _matching(params, reg_state.anchor)
    omega = _matching(params, reg_state.importance or {})
    usable = {n: params[n] for n in anchor if n in omega}
    if not usable:
        return zero
    return mas_penalty(usable, anchor, omega, spec.lambda_mas)


def _refresh_regularizer_state(model, task, spec, prev: RegularizerState,
                               device) -> RegularizerState:
    anchor = {n: p.detach().clone() for n, p in _named_params(model).items()}
    importance = None
    if spec.regularizer == "mas":
        importance = _estimate_importance(model, task, spec, device)
        if prev.importance is not None and spec.mas_accumulation > 0:
            importance = {
                n: (importance[n] + spec.mas_accumulation * prev.importance[n]
                    if n in prev.importance
                    and prev.importance[n].shape == importance[n].shape
                    else importance[n])
                for n in importance
            }
    frozen = None
    if spec.regularizer in ("lwf_kd", "ird") or spec.classifier_strategy == "ssil":
        frozen = model.eval_clone()
    return RegularizerState(anchor, importance, frozen)


def _estimate_importance(model, task, spec, device):
    # Importance is measured on the task's own images, through the logits
    # for ce and through the projection output when no classifier exists.
    if spec.objective == "ce":
        if getattr(model.head, "head_kind", None) == "per_task":
            probe = _LogitModel(model.encoder, model.head, task.spec.task_id)
        else:
            probe = _LogitModel(model.encoder, model.head)
    else:
        probe = _ProjModel(model.encoder, model.projection)
    n = min(len(task.train), spec.mas_importance_samples)
    stride = max(1, len(task.train) // n)
    images = task.train.images[::stride][:n]   # spread over the class layout
    batches = [batch_to_tensor(images[i:i + 32], device)
               for i in range(0, len(images), 32)]
    return mas_importance(probe, batches)


def _write_loss_log(path: str, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "task", "loss_total", "loss_main", "loss_reg"])
        for step, t, total, main, reg in rows:
            writer.writerow([step, t, f"{total:.6f}", f"{main:.6f}", f"{reg:.6f}"])


# ---------------------------------------------------------------------------
# Reference learners
# ---------------------------------------------------------------------------

def gdumb_learner(
    memory: ExemplarMemory,
    architecture: str,
    spec: AlgorithmSpec,
    config: TrainConfig,
    seed: int,
) -> ModelState:
    """Train a fresh classifier on nothing but the memory contents."""
    if len(memory) == 0:
        raise ProtocolError("memory is empty")
    examples = memory.all_examples()
    if any(ex.label is None for ex in examples):
        raise ProtocolError("memory holds unlabeled examples")
    images = np.stack([ex.image for ex in examples])
    labels = np.array([ex.label for ex in examples])
    dataset = ArrayDataset(images, labels, memory.dataset.num_classes,
                           indices=np.arange(len(examples)), name="memory")
    class_set = tuple(sorted(int(c) for c in np.unique(labels)))
    task = Task(TaskSpec(1, class_set, "class_il", True), dataset,
                dataset.subset([], name="empty"))
    train_spec = AlgorithmSpec(**{**spec.to_dict(), "learner": "incremental",
                                  "objective": "ce", "regularizer": "none",
                                  "classifier_strategy": "standard",
                                  "memory_batch_size": 0})
    torch.manual_seed(stream_seed(seed, "init"))
    model = ModelState(build_encoder(architecture,
                                     in_channels=images.shape[-1]))
    model, _ = train_task(model, task, None, train_spec, config, seed)
    return model


def merge_tasks(tasks: Sequence[Task]) -> Task:
    """Concatenate tasks 1..t into one joint training task."""
    class_set: List[int] = []
    for task in tasks:
        for c in task.spec.class_set:
            if c not in class_set:
                class_set.append(c)
    spec = TaskSpec(tasks[-1].spec.task_id, tuple(class_set),
                    tasks[-1].spec.mode, tasks[-1].spec.supervised)
    return Task(spec,
                concat_datasets([t.train for t in tasks], name="joint/train"),
                concat_datasets([t.test for t in tasks], name="joint/test"))


def joint_learner(
    tasks: Sequence[Task],
    architecture: str,
    spec: AlgorithmSpec,
    config: TrainConfig,
    seed: int,
) -> ModelState:
    """Upper-bound learner: retrain from scratch on all tasks seen so far."""
    merged = merge_tasks(tasks)
    train_spec = AlgorithmSpec(**{**spec.to_dict(), "learner": "incremental",
                                  "regularizer": "none",
                                  "classifier_strategy": "standard",
                                  "memory_batch_size": 0})
    torch.manual_seed(stream_seed(seed, "init"))
    in_channels = merged.train.images.shape[-1]
    model = ModelState(build_encoder(architecture, in_channels=in_channels))
    model, _ = train_task(model, merged, None, train_spec, config, seed)
    return model
