"""Training objectives and regularizers for the per-task trainers.

Everything here is a pure function of tensors (plus, for the importance
estimator, a model), works in float32 or float64, and is exercised against
brute-force oracles and finite-difference gradient checks in the tests.
"""
from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .errors import ProtocolError

logger = logging.getLogger(__name__)


def loss_ce(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy; labels index columns of ``logits``."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(
            f"label outside [0, {logits.shape[1]}): {labels.min()}..{labels.max()}")
    return F.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# Parameter-importance regularization
# ---------------------------------------------------------------------------

def mas_importance(
    model: torch.nn.Module,
    data_batches: Iterable[torch.Tensor],
) -> Dict[str, torch.Tensor]:
    """Importance of each parameter for the model's output magnitude.

    For every input x the gradient of ||f(x)||^2 with respect to each
    parameter is taken; the importance is the mean absolute per-input
    gradient. Computed sample by sample in eval mode so batch statistics
    and sign cancellation cannot blur the estimate.
    """
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    omega = {n: torch.zeros_like(p) for n, p in named}
    was_training = model.training
    model.eval()
    n_inputs = 0
    for batch in data_batches:
        for i in range(batch.shape[0]):
            out = model(batch[i:i + 1])
            sq = out.pow(2).sum()
            grads = torch.autograd.grad(sq, [p for _, p in named],
                                        allow_unused=True)
            for (n, _), g in zip(named, grads):
                if g is not None:
                    omega[n] += g.abs()
            n_inputs += 1
    if was_training:
        model.train()
    if n_inputs == 0:
        raise ValueError("mas_importance needs at least one input")
    return {n: o / n_inputs for n, o in omega.items()}


def mas_penalty(
    params: Dict[str, torch.Tensor],
    anchor: Dict[str, torch.Tensor],
    omega: Dict[str, torch.Tensor],
    lam: float,
) -> torch.Tensor:
    """lam * sum_i omega_i * (theta_i - anchor_i)^2 over shared names."""
    total = None
    for name, p in params.items():
        if name not in omega:
            continue
        a, w = anchor[name], omega[name]
        if a.shape != p.shape or w.shape != p.shape:
            raise RuntimeError(f"shape mismatch for parameter {name}")
        term = (w * (p - a) ** 2).sum()
        total = term if total is None else total + term
    if total is None:
        raise ValueError("no overlapping parameters")
    return lam * total


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------

def loss_lwf_kd(
    current_logits_old: torch.Tensor,
    frozen_logits: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Temperature-softened KL from the frozen model to the current one.

    KL(softmax(frozen/T) || softmax(current/T)), averaged over the batch;
    zero exactly when the softened distributions match.
    """
    if current_logits_old.shape != frozen_logits.shape:
        raise ProtocolError(
            f"logit widths differ: {tuple(current_logits_old.shape)} vs "
            f"{tuple(frozen_logits.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    log_p = F.log_softmax(frozen_logits / temperature, dim=1)
    log_q = F.log_softmax(current_logits_old / temperature, dim=1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=1).mean()


def _blocks(task_boundaries: Sequence[int]) -> List[Tuple[int, int]]:
    starts = [0] + list(task_boundaries[:-1])
    return list(zip(starts, task_boundaries))


def ssil_separated_ce(
    logits_current: torch.Tensor,
    labels_current: torch.Tensor,
    logits_memory: Optional[torch.Tensor],
    labels_memory: Optional[torch.Tensor],
    task_boundaries: Sequence[int],
) -> torch.Tensor:
    """Cross-entropy with the softmax restricted to each sample's own task block.

    Current-batch samples are scored inside the newest block only; memory
    samples inside the block of the task that introduced their class.
    Labels are head-column indices. Because blocks are sliced out before
    the softmax, the gradient on every other block's logits is exactly
    zero.
    """
    blocks = _blocks(task_boundaries)
    cur_lo, cur_hi = blocks[-1]
    labels_current = torch.as_tensor(labels_current, dtype=torch.long)
    if labels_current.numel() and not bool(
            ((labels_current >= cur_lo) & (labels_current < cur_hi)).all()):
        raise ValueError("current-batch labels fall outside the newest block")
    total = F.cross_entropy(
        logits_current[:, cur_lo:cur_hi], labels_current - cur_lo,
        reduction="sum")
    count = logits_current.shape[0]
    if logits_memory is not None and logits_memory.shape[0]:
        labels_memory = torch.as_tensor(labels_memory, dtype=torch.long)
        for lo, hi in blocks:
            in_block = (labels_memory >= lo) & (labels_memory < hi)
            if not bool(in_block.any()):
                continue
            total = total + F.cross_entropy(
                logits_memory[in_block][:, lo:hi],
                labels_memory[in_block] - lo, reduction="sum")
        count += logits_memory.shape[0]
    return total / count


def ssil_task_kd(
    logits_all: torch.Tensor,
    frozen_logits_all: torch.Tensor,
    task_boundaries: Sequence[int],
    temperature: float,
) -> torch.Tensor:
    """Per-block distillation against the frozen model, summed over old blocks."""
    blocks = _blocks(task_boundaries)[:-1]
    total = logits_all.new_zeros(())
    for lo, hi in blocks:
        total = total + loss_lwf_kd(
            logits_all[:, lo:hi], frozen_logits_all[:, lo:hi], temperature)
    return total


def loss_ssil(
    batch_current: Tuple[torch.Tensor, torch.Tensor],
    batch_memory: Optional[Tuple[torch.Tensor, torch.Tensor]],
    model,
    frozen_model,
    task_boundaries: Sequence[int],
    temperature: float = 2.0,
) -> torch.Tensor:
    """Separated-softmax replay loss with task-wise distillation.

    ``model`` and ``frozen_model`` are callables mapping an image batch to
    shared-head logits; labels in the batches are head-column indices.
    From the second task on both a memory batch and a frozen model are
    required.
    """
    images_cur, labels_cur = batch_current
    n_tasks = len(task_boundaries)
    if n_tasks >= 2 and (batch_memory is None or batch_memory[0].shape[0] == 0):
        raise ProtocolError("replay batch required once previous tasks exist")
    if n_tasks >= 2 and frozen_model is None:
        raise ProtocolError("frozen model required once previous tasks exist")

    if batch_memory is not None and batch_memory[0].shape[0]:
        images_mem, labels_mem = batch_memory
        images_all = torch.cat([images_cur, images_mem], dim=0)
    else:
        images_mem, labels_mem = None, None
        images_all = images_cur
    logits_all = model(images_all)
    logits_cur = logits_all[: images_cur.shape[0]]
    logits_mem = logits_all[images_cur.shape[0]:] if images_mem is not None else None

    total = ssil_separated_ce(logits_cur, labels_cur, logits_mem, labels_mem,
                              task_boundaries)
    if n_tasks >= 2:
        with torch.no_grad():
            frozen_logits = frozen_model(images_all)
        total = total + ssil_task_kd(
            logits_all[:, : frozen_logits.shape[1]], frozen_logits,
            task_boundaries, temperature)
    return total


# ---------------------------------------------------------------------------
# Contrastive objectives
# ---------------------------------------------------------------------------

def _ensure_unit_norm(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
        logger.warning("%s were not unit-norm, normalizing", what)
        return F.normalize(x, dim=1)
    return x


def loss_supcon(
    features: torch.Tensor,
    labels: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Supervised contrastive loss over one batch of unit-norm features.

    Each anchor is pulled toward every same-label feature against all
    other features; anchors without a positive are skipped.
    """
    if features.shape[0] < 2:
        raise ValueError("need at least two samples")
    features = _ensure_unit_norm(features, "supcon features")
    labels = torch.as_tensor(labels, device=features.device).reshape(-1)
    b = features.shape[0]
    sim = features @ features.T / temperature
    self_mask = torch.eye(b, dtype=torch.bool, device=features.device)
    pos_mask = (labels[:, None] == labels[None, :]) & ~self_mask
    anchors = pos_mask.any(dim=1)
    if not bool(anchors.any()):
        raise ValueError("no anchor has a positive")
    log_prob = sim - torch.logsumexp(
        sim.masked_fill(self_mask, float("-inf")), dim=1, keepdim=True)
    mean_pos = (log_prob * pos_mask).sum(dim=1)[anchors] / pos_mask.sum(dim=1)[anchors]
    return -mean_pos.mean()


def loss_ird(
    features_current: torch.Tensor,
    features_past: torch.Tensor,
    tau_current: float,
    tau_past: float,
    instance_ids_current: Optional[Sequence[int]] = None,
    instance_ids_past: Optional[Sequence[int]] = None,
) -> torch.Tensor:
    """Instance-wise relation distillation between two encodings of a batch.

    Each model induces, per instance, a softmax distribution over its
    similarities to the other instances; the loss is the mean relative
    entropy from the past model's distribution to the current one, so it
    is exactly zero when the two relation patterns coincide (it differs
    from the plain cross-entropy form only by a constant with no gradient
    through the current model). Instance ids, when given, guard against
    silently comparing differently-ordered batches.
    """
    if features_current.shape != features_past.shape:
        raise ProtocolError("feature sets must have identical shape")
    if features_current.shape[0] < 3:
        raise ValueError("need at least three instances")
    if instance_ids_current is not None or instance_ids_past is not None:
        if list(instance_ids_current or []) != list(instance_ids_past or []):
            raise ProtocolError("batch order mismatch between current and past features")
    fc = _ensure_unit_norm(features_current, "current features")
    fp = _ensure_unit_norm(features_past.detach(), "past features")
    b = fc.shape[0]
    self_mask = torch.eye(b, dtype=torch.bool, device=fc.device)
    sim_c = (fc @ fc.T / tau_current).masked_fill(self_mask, float("-inf"))
    sim_p = (fp @ fp.T / tau_past).masked_fill(self_mask, float("-inf"))
    log_q = F.log_softmax(sim_c, dim=1)
    log_p = F.log_softmax(sim_p, dim=1)
    p = log_p.exp()
    kl = (p * (log_p - log_q)).masked_fill(self_mask, 0.0).sum(dim=1)
    return kl.mean()


def loss_infonce(
    query: torch.Tensor,
    positive_key: torch.Tensor,
    queue: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Contrast each query against its positive key and the queued negatives."""
    if queue.shape[0] < 1:
        raise ProtocolError("negative queue is empty")
    query = _ensure_unit_norm(query, "queries")
    positive_key = _ensure_unit_norm(positive_key.detach(), "positive keys")
    queue = _ensure_unit_norm(queue.detach(), "queue keys")
    l_pos = (query * positive_key).sum(dim=1, keepdim=True)
    l_neg = query @ queue.T
    logits = torch.cat([l_pos, l_neg], dim=1) / temperature
    targets = torch.zeros(query.shape[0], dtype=torch.long, device=query.device)
    return F.cross_entropy(logits, targets)
