"""Representation evaluation: output-layer retraining, transfer, bias metrics.

The encoder under test is never touched: the probe trains a fresh head on
the class-balanced evaluation memory with the encoder frozen (parameters
and normalization statistics), and downstream transfer fine-tunes a copy.
The gap between raw accuracy and retrained-head accuracy measures how
much of the apparent forgetting is head bias rather than representation
loss.
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .augment import augment
from .data import ArrayDataset, SourceDataset
from .errors import ConfigurationError, ProtocolError
from .losses import loss_ce
from .models import (
    ConvEncoder,
    MultiHead,
    SingleHead,
    batch_to_tensor,
    encoder_checksum,
    refresh_norm_stats,
)
from .memory import ExemplarMemory
from .seeding import stream_rng, stream_seed

logger = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    """Optimization budget for retraining the output layer."""

    epochs: int = 200
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: Optional[int] = None   # None = full batch
    lr_schedule: str = "cosine"


@dataclass
class TransferConfig:
    """Optimization budget for downstream fine-tuning."""

    epochs: int = 5
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64
    finetune_encoder: bool = True
    expected_classes: Optional[int] = None


def embed_dataset(
    encoder: ConvEncoder,
    images: np.ndarray,
    device: str = "cpu",
    chunk: int = 256,
) -> torch.Tensor:
    """Deterministic eval-mode embeddings of an image array."""
    encoder.eval()
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            outs.append(encoder(batch_to_tensor(images[i:i + chunk], device)))
    return torch.cat(outs, dim=0)


def retrain_output_layer(
    encoder: ConvEncoder,
    memory_o: ExemplarMemory,
    probe_config: ProbeConfig,
    seed: int,
    device: str = "cpu",
    expected_classes: Optional[Sequence[int]] = None,
) -> SingleHead:
    """Train a fresh single head on the evaluation memory, encoder frozen.

    The head covers exactly the classes stored in ``memory_o``; classes of
    ``expected_classes`` missing from the memory are logged because they
    will score zero at test time. The encoder is verified bit-identical
    before and after.
    """
    if len(memory_o) == 0:
        raise ProtocolError("evaluation memory is empty")
    before = encoder_checksum(encoder)
    examples = memory_o.all_examples()
    if any(ex.label is None for ex in examples):
        raise ProtocolError("evaluation memory must be labeled")
    classes = sorted({ex.label for ex in examples})
    if expected_classes is not None:
        missing = sorted(set(expected_classes) - set(classes))
        if missing:
            logger.warning(
                "evaluation memory lacks classes %s; they will score 0", missing)

    images = np.stack([augment(ex.image, "eval_none") for ex in examples])
    z = embed_dataset(encoder, images, device).detach()
    torch.manual_seed(stream_seed(seed, "probe"))
    head = SingleHead(encoder.embedding_dim, classes).to(device)
    cols = head.column_of(torch.tensor([ex.label for ex in examples])).to(device)

    opt = torch.optim.SGD(head.parameters(), lr=probe_config.lr,
                          momentum=probe_config.momentum,
                          weight_decay=probe_config.weight_decay)
    rng = stream_rng(seed, "probe", 1)
    n = len(examples)
    bs = probe_config.batch_size or n
    steps_per_epoch = max(1, math.ceil(n / bs))
    total = probe_config.epochs * steps_per_epoch
    step = 0
    head.train()
    for _ in range(probe_config.epochs):
        order = rng.permutation(n) if bs < n else np.arange(n)
        for start in range(0, n, bs):
            pos = order[start:start + bs]
            if probe_config.lr_schedule == "cosine" and total > 1:
                lr = 0.5 * probe_config.lr * (1 + math.cos(math.pi * step / (total - 1)))
            else:
                lr = probe_config.lr
            for g in opt.param_groups:
                g["lr"] = lr
            loss = loss_ce(head(z[pos]), cols[pos])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
    head.eval()
    after = encoder_checksum(encoder)
    if before != after:
        raise RuntimeError("encoder changed during output-layer retraining")
    return head


def _predict_single_head(encoder, head, images, device, chunk=512) -> np.ndarray:
    encoder.eval()
    head.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            logits = head(encoder(batch_to_tensor(images[i:i + chunk], device)))
            preds.append(logits.argmax(dim=1).cpu().numpy())
    cols = np.concatenate(preds) if preds else np.array([], dtype=int)
    class_ids = np.array(head.class_ids)
    return class_ids[cols]


def _task_of(label: int, task_class_sets: Sequence[Sequence[int]]) -> int:
    for t, cs in enumerate(task_class_sets):
        if label in cs:
            return t
    raise ValueError(f"class {label} belongs to no task")


def evaluate_accuracy(
    encoder: ConvEncoder,
    head,
    dataset: ArrayDataset,
    mode: str = "class_il",
    task_class_sets: Optional[Sequence[Sequence[int]]] = None,
    device: str = "cpu",
) -> float:
    """Top-1 accuracy over ``dataset``.

    Under ``task_il`` each test example comes with its task identity, so
    prediction is restricted to that task's classes (its dedicated head,
    or the matching columns of a shared head). Classes absent from the
    head count as wrong.
    """
    if dataset.labels is None:
        raise ProtocolError("evaluation needs labels")
    if len(dataset) == 0:
        raise ValueError("empty evaluation set")
    labels = dataset.labels

    if mode in ("class_il", "data_il"):
        if isinstance(head, MultiHead):
            raise ProtocolError(f"{mode} evaluation requires a shared head")
        known = set(head.class_ids)
        unknown = sorted(set(int(l) for l in labels) - known)
        if unknown:
            logger.warning("classes %s absent from head count as wrong", unknown)
        preds = _predict_single_head(encoder, head, dataset.images, device)
        return float((preds == labels).mean())

    if mode != "task_il":
        raise ConfigurationError(f"unknown evaluation mode {mode!r}")
    if task_class_sets is None:
        raise ProtocolError("task_il evaluation needs the per-task class sets")
    encoder.eval()
    correct = 0
    task_of_example = np.array([_task_of(int(l), task_class_sets) for l in labels])
    with torch.no_grad():
        for t in np.unique(task_of_example):
            sel = task_of_example == t
            imgs = dataset.images[sel]
            true = labels[sel]
            if isinstance(head, MultiHead):
                task_id = t + 1
                classes = np.array(head.task_classes[task_id])
                logits = head(encoder(batch_to_tensor(imgs, device)), task_id)
            else:
                in_head = [c for c in task_class_sets[t] if c in head.class_ids]
                if not in_head:
                    logger.warning("task %d classes absent from head", t + 1)
                    continue
                col_idx = torch.tensor([head.class_ids.index(c) for c in in_head])
                classes = np.array(in_head)
                logits = head(encoder(batch_to_tensor(imgs, device)))[:, col_idx]
            preds = classes[logits.argmax(dim=1).cpu().numpy()]
            correct += int((preds == true).sum())
    return correct / len(dataset)


def bias_profile(
    encoder: ConvEncoder,
    head: SingleHead,
    dataset: ArrayDataset,
    task_class_sets: Sequence[Sequence[int]],
    device: str = "cpu",
) -> np.ndarray:
    """Row-stochastic task-confusion matrix over a cumulative test set.

    Entry (i, j) is the fraction of task-i test examples whose predicted
    class belongs to task j; the diagonal is within-task prediction mass.
    """
    if dataset.labels is None:
        raise ProtocolError("bias profile needs labels")
    n_tasks = len(task_class_sets)
    preds = _predict_single_head(encoder, head, dataset.images, device)
    counts = np.zeros((n_tasks, n_tasks), dtype=np.float64)
    for true_label, pred_label in zip(dataset.labels, preds):
        counts[_task_of(int(true_label), task_class_sets),
               _task_of(int(pred_label), task_class_sets)] += 1
    sums = counts.sum(axis=1, keepdims=True)
    np.divide(counts, sums, out=counts, where=sums > 0)
    return counts


def newest_task_mass(confusion: np.ndarray) -> float:
    """Mean prediction mass routed to the newest task from older tasks' rows."""
    if confusion.shape[0] < 2:
        return 0.0
    return float(confusion[:-1, -1].mean())


def downstream_transfer(
    encoder: ConvEncoder,
    downstream: SourceDataset,
    transfer_config: TransferConfig,
    seed: int,
    device: str = "cpu",
) -> float:
    """Fine-tune a copy of the encoder plus a fresh head on a held-out task.

    Returns test accuracy; the encoder passed in is left untouched (the
    whole run works on a deep copy).
    """
    if (transfer_config.expected_classes is not None
            and transfer_config.expected_classes != downstream.num_classes):
        raise ConfigurationError(
            f"transfer config expects {transfer_config.expected_classes} classes "
            f"but dataset has {downstream.num_classes}")
    before = encoder_checksum(encoder)
    work = copy.deepcopy(encoder).to(device)
    torch.manual_seed(stream_seed(seed, "transfer"))
    head = SingleHead(work.embedding_dim, range(downstream.num_classes)).to(device)
    params = list(head.parameters())
    if transfer_config.finetune_encoder:
        params += list(work.parameters())
        work.train()
    else:
        work.eval()
    head.train()
    opt = torch.optim.SGD(params, lr=transfer_config.lr,
                          momentum=transfer_config.momentum,
                          weight_decay=transfer_config.weight_decay)
    rng_batch = stream_rng(seed, "transfer", 1)
    rng_aug = stream_rng(seed, "transfer", 2)
    train = downstream.train
    for _ in range(transfer_config.epochs):
        order = rng_batch.permutation(len(train))
        for start in range(0, len(order), transfer_config.batch_size):
            pos = order[start:start + transfer_config.batch_size]
            views = np.stack([augment(train.images[int(p)], "ce_standard", rng_aug)
                              for p in pos])
            x = batch_to_tensor(views, device)
            cols = head.column_of(torch.tensor(train.labels[pos])).to(device)
            loss = loss_ce(head(work(x)), cols)
            opt.zero_grad()
            loss.backward()
            opt.step()
    if transfer_config.finetune_encoder and transfer_config.epochs > 0:
        refresh_norm_stats(work, train.images, device=device)
    acc = evaluate_accuracy(work, head, downstream.test, mode="class_il",
                            device=device)
    if encoder_checksum(encoder) != before:
        raise RuntimeError("original encoder mutated during transfer")
    return acc


# ---------------------------------------------------------------------------
# Per-task evaluation report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """All metrics recorded at one task boundary of one run."""

    task_index: int
    gd_accuracy: float
    raw_accuracy: Optional[float] = None
    bias_gap: Optional[float] = None
    task_confusion: Optional[List[List[float]]] = None
    task_confusion_gd: Optional[List[List[float]]] = None
    downstream: Dict[str, float] = field(default_factory=dict)
    scenario: str = ""
    seed: int = 0

    def __post_init__(self):
        for name in ("raw_accuracy", "gd_accuracy"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        for conf in (self.task_confusion, self.task_confusion_gd):
            if conf is not None:
                rows = np.asarray(conf)
                nonzero = rows.sum(axis=1) > 0
                if not np.allclose(rows.sum(axis=1)[nonzero], 1.0, atol=1e-6):
                    raise ValueError("confusion rows must sum to 1")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_json())
