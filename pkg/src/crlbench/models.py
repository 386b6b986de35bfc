"""Encoder/output-layer decomposition plus contrastive-training machinery.

The classification model factors into an encoder mapping image batches to
embeddings and one or more output heads mapping embeddings to logits.
Heads come in three kinds: a single shared head that grows as classes
arrive, per-task heads selected by task id, and a projection head for
contrastive objectives. Contrastive training additionally keeps a
momentum copy of the encoder and a ring-buffer queue of negative keys.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ProtocolError

logger = logging.getLogger(__name__)


def batch_to_tensor(images: np.ndarray, device: str = "cpu") -> torch.Tensor:
    """(B,H,W,C) float arrays in [0,1] to the (B,C,H,W) tensors modules eat."""
    arr = np.ascontiguousarray(np.asarray(images, dtype=np.float32))
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(device)


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------

class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


#: name -> (stage widths, blocks per stage). Embedding width equals the last
#: stage width; ``resnet18`` is the full-scale preset, the others are desk
#: scale (``micro`` trades capacity for CPU speed in tests and demos).
ARCHITECTURES: Dict[str, Tuple[Tuple[int, ...], Tuple[int, ...]]] = {
    "micro": ((16, 32, 64), (1, 1, 1)),
    "small": ((32, 64, 128), (1, 1, 2)),
    "medium": ((32, 64, 128), (2, 2, 2)),
    "resnet18": ((64, 128, 256, 512), (2, 2, 2, 2)),
}


class ConvEncoder(nn.Module):
    """Compact residual CNN; forward maps (B,C,H,W) to (B, embedding_dim)."""

    def __init__(self, architecture: str = "micro", in_channels: int = 3):
        super().__init__()
        if architecture not in ARCHITECTURES:
            raise ConfigurationError(
                f"unknown architecture {architecture!r}; "
                f"choose from {sorted(ARCHITECTURES)}")
        widths, blocks = ARCHITECTURES[architecture]
        self.architecture = architecture
        self.in_channels = in_channels
        self.embedding_dim = widths[-1]

        layers: List[nn.Module] = [
            nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        ]
        ch = widths[0]
        for stage, (w, n) in enumerate(zip(widths, blocks)):
            for b in range(n):
                stride = 2 if (stage > 0 and b == 0) else 1
                layers.append(ResidualBlock(ch, w, stride))
                ch = w
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected (B,{self.in_channels},H,W) input, got {tuple(x.shape)}")
        h = self.body(x)
        return F.adaptive_avg_pool2d(h, 1).flatten(1)


def build_encoder(architecture: str = "micro", in_channels: int = 3) -> ConvEncoder:
    return ConvEncoder(architecture, in_channels)


def forward_features(encoder: ConvEncoder, batch: torch.Tensor) -> torch.Tensor:
    return encoder(batch)


def refresh_norm_stats(encoder: nn.Module, images: np.ndarray,
                       device: str = "cpu", batch_size: int = 64) -> None:
    """Recompute batch-norm running statistics under the current weights.

    Tiny desk-scale batches leave running estimates far from the feature
    distribution the final weights produce, which wrecks eval-mode
    predictions; a cumulative-average pass over ``images`` settles them.
    """
    bn_layers = [m for m in encoder.modules()
                 if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bn_layers or len(images) == 0:
        return
    was_training = encoder.training
    momenta = []
    for m in bn_layers:
        m.reset_running_stats()
        momenta.append(m.momentum)
        m.momentum = None   # cumulative average over the refresh pass
    encoder.train()
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            encoder(batch_to_tensor(images[i:i + batch_size], device))
    for m, mom in zip(bn_layers, momenta):
        m.momentum = mom
    if not was_training:
        encoder.eval()


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

class SingleHead(nn.Module):
    """Shared linear head over every class seen so far.

    Column order is class introduction order; ``class_ids`` maps columns
    back to dataset class ids and ``column_of`` maps labels to columns.
    """

    head_kind = "single"

    def __init__(self, embedding_dim: int, class_ids: Sequence[int]):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.class_ids: List[int] = list(dict.fromkeys(int(c) for c in class_ids))
        if len(self.class_ids) != len(list(class_ids)):
            raise ProtocolError("duplicate class ids in head")
        self.fc = nn.Linear(embedding_dim, len(self.class_ids))

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def column_of(self, labels: torch.Tensor) -> torch.Tensor:
        lut = {c: i for i, c in enumerate(self.class_ids)}
        return torch.tensor([lut[int(l)] for l in labels], dtype=torch.long,
                            device=labels.device if torch.is_tensor(labels) else None)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc(z)


def expand_single_head(
    head: SingleHead,
    new_classes: Sequence[int],
    init_std: float = 0.01,
    generator: Optional[torch.Generator] = None,
) -> SingleHead:
    """Grow a shared head by new class columns, preserving old weights bitwise.

    New rows start as small zero-mean noise so freshly added classes carry
    no systematic logit advantage before training.
    """
    new_classes = [int(c) for c in new_classes]
    overlap = set(new_classes) & set(head.class_ids)
    if overlap:
        raise ProtocolError(f"classes already present in head: {sorted(overlap)}")
    if not new_classes:
        return head
    old_fc = head.fc
    fc = nn.Linear(head.embedding_dim, head.num_classes + len(new_classes))
    with torch.no_grad():
        fc.weight[: head.num_classes] = old_fc.weight
        fc.bias[: head.num_classes] = old_fc.bias
        fc.weight[head.num_classes:] = torch.normal(
            0.0, init_std, size=(len(new_classes), head.embedding_dim),
            generator=generator)
        fc.bias[head.num_classes:] = 0.0
    head.fc = fc
    head.class_ids = head.class_ids + new_classes
    return head


class MultiHead(nn.Module):
    """One linear head per task, selected by task id at forward time."""

    head_kind = "per_task"

    def __init__(self, embedding_dim: int):
        super().__init__()
        self.embedding_dim = embedding_dim
        self.heads = nn.ModuleDict()
        self.task_classes: Dict[int, List[int]] = {}

    def add_task(self, task_id: int, class_ids: Sequence[int]) -> None:
        key = str(int(task_id))
        if key in self.heads:
            raise ProtocolError(f"task {task_id} already has a head")
        self.heads[key] = nn.Linear(self.embedding_dim, len(list(class_ids)))
        self.task_classes[int(task_id)] = [int(c) for c in class_ids]

    def column_of(self, task_id: int, labels) -> torch.Tensor:
        lut = {c: i for i, c in enumerate(self.task_classes[int(task_id)])}
        return torch.tensor([lut[int(l)] for l in labels], dtype=torch.long)

    def forward(self, z: torch.Tensor, task_id: int) -> torch.Tensor:
        key = str(int(task_id))
        if key not in self.heads:
            raise ProtocolError(f"no head for task {task_id}")
        return self.heads[key](z)


class ProjectionHead(nn.Module):
    """Two-layer MLP onto the unit sphere, for contrastive objectives."""

    head_kind = "projection"

    def __init__(self, embedding_dim: int, proj_dim: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(embedding_dim, embedding_dim),
            nn.ReLU(inplace=True),
            nn.Linear(embedding_dim, proj_dim),
        )
        self.proj_dim = proj_dim

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(z), dim=1)


def forward_logits(
    encoder: ConvEncoder,
    head: nn.Module,
    batch: torch.Tensor,
    task_id: Optional[int] = None,
) -> torch.Tensor:
    """Embed a batch and apply the selected head.

    ``task_id`` is required exactly when the head is per-task.
    """
    z = encoder(batch)
    if getattr(head, "head_kind", None) == "per_task":
        if task_id is None:
            raise ProtocolError("per-task head needs a task_id")
        return head(z, task_id)
    if task_id is not None and getattr(head, "head_kind", None) == "single":
        raise ProtocolError("single head does not take a task_id")
    return head(z)


# ---------------------------------------------------------------------------
# Momentum encoder + negative-key queue
# ---------------------------------------------------------------------------

@dataclass
class ContrastiveState:
    """Momentum (key) copies of encoder and projection plus the key queue.

    The queue is a ring buffer of unit-norm key vectors; ``queue_ptr``
    points at the next slot to overwrite and ``filled`` counts warmed
    slots. With ``warm_start`` the queue begins full of random unit
    vectors, the usual way to make the loss well-defined from step one.
    """

    key_encoder: ConvEncoder
    key_projection: Optional[ProjectionHead]
    queue: torch.Tensor
    queue_ptr: int = 0
    filled: int = 0
    momentum: float = 0.999
    temperature: float = 0.2

    @classmethod
    def create(
        cls,
        encoder: ConvEncoder,
        projection: Optional[ProjectionHead],
        queue_size: int,
        momentum: float = 0.999,
        temperature: float = 0.2,
        warm_start: bool = True,
        generator: Optional[torch.Generator] = None,
    ) -> "ContrastiveState":
        if not 0.0 <= momentum <= 1.0:
            raise ConfigurationError("momentum must lie in [0, 1]")
        if temperature <= 0:
            raise ConfigurationError("temperature must be positive")
        key_encoder = copy.deepcopy(encoder)
        key_projection = copy.deepcopy(projection) if projection is not None else None
        for p in key_encoder.parameters():
            p.requires_grad_(False)
        if key_projection is not None:
            for p in key_projection.parameters():
                p.requires_grad_(False)
        dim = key_projection.proj_dim if key_projection else encoder.embedding_dim
        queue = torch.zeros(queue_size, dim)
        filled = 0
        if warm_start:
            queue = torch.randn(queue_size, dim, generator=generator)
            queue = F.normalize(queue, dim=1)
            filled = queue_size
        return cls(key_encoder, key_projection, queue, 0, filled,
                   momentum, temperature)

    def negatives(self) -> torch.Tensor:
        return self.queue[: self.filled]


def ema_update(state: ContrastiveState, query_encoder: ConvEncoder,
               query_projection: Optional[ProjectionHead] = None) -> ContrastiveState:
    """key <- m * key + (1 - m) * query, elementwise over parameters.

    Non-parameter buffers (batch-norm statistics) are copied from the
    query side so the key network normalizes like the network it shadows.
    """
    m = state.momentum
    pairs = [(state.key_encoder, query_encoder)]
    if query_projection is not None and state.key_projection is not None:
        pairs.append((state.key_projection, query_projection))
    with torch.no_grad():
        for key_mod, query_mod in pairs:
            kp = dict(key_mod.named_parameters())
            for name, qv in query_mod.named_parameters():
                if kp[name].shape != qv.shape:
                    raise RuntimeError(f"shape mismatch on parameter {name}")
                # lerp form is exact at m in {0, 1} and when key == query
                kp[name].lerp_(qv, 1.0 - m)
            kb = dict(key_mod.named_buffers())
            for name, qv in query_mod.named_buffers():
                kb[name].copy_(qv)
    return state


def queue_push(state: ContrastiveState, keys: torch.Tensor) -> ContrastiveState:
    """Overwrite the oldest slots of the ring buffer with fresh keys."""
    keys = keys.detach()
    norms = keys.norm(dim=1)
    if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
        logger.warning("queue_push: keys were not unit-norm, normalizing")
        keys = F.normalize(keys, dim=1)
    k = state.queue.shape[0]
    b = keys.shape[0]
    if b >= k:
        state.queue.copy_(keys[-k:])
        state.queue_ptr = 0
        state.filled = k
        return state
    ptr = state.queue_ptr
    end = ptr + b
    if end <= k:
        state.queue[ptr:end] = keys
    else:
        first = k - ptr
        state.queue[ptr:] = keys[:first]
        state.queue[: end - k] = keys[first:]
    state.queue_ptr = end % k
    state.filled = min(state.filled + b, k)
    return state


# ---------------------------------------------------------------------------
# Model bundle, checkpoints, checksums
# ---------------------------------------------------------------------------

@dataclass
class ModelState:
    """Everything one continual run trains: encoder, heads, contrastive gear."""

    encoder: ConvEncoder
    head: Optional[nn.Module] = None
    projection: Optional[ProjectionHead] = None
    contrastive: Optional[ContrastiveState] = None

    @property
    def architecture(self) -> str:
        return self.encoder.architecture

    def modules(self) -> Dict[str, nn.Module]:
        out = {"encoder": self.encoder}
        if self.head is not None:
            out["head"] = self.head
        if self.projection is not None:
            out["projection"] = self.projection
        return out

    def eval_clone(self) -> "ModelState":
        dup = copy.deepcopy(self)
        for mod in dup.modules().values():
            mod.eval()
            for p in mod.parameters():
                p.requires_grad_(False)
        return dup


def encoder_checksum(encoder: nn.Module) -> str:
    """Digest over parameters and buffers; equality means bit-identical."""
    h = hashlib.sha256()
    state = encoder.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _head_layout(head: Optional[nn.Module]) -> dict:
    if head is None:
        return {"kind": "none"}
    if head.head_kind == "single":
        return {"kind": "single", "class_ids": list(head.class_ids)}
    if head.head_kind == "per_task":
        return {"kind": "per_task",
                "task_classes": {str(t): cs for t, cs in head.task_classes.items()}}
    return {"kind": "projection", "proj_dim": head.proj_dim}


def save_checkpoint(path: str, model: ModelState, task_index: int,
                    extra: Optional[dict] = None) -> None:
    """Write model tensors plus a JSON sidecar describing their layout."""
    payload = {
        "encoder": model.encoder.state_dict(),
        "head": model.head.state_dict() if model.head is not None else None,
        "projection": (model.projection.state_dict()
                       if model.projection is not None else None),
    }
    if model.contrastive is not None:
        c = model.contrastive
        payload["contrastive"] = {
            "key_encoder": c.key_encoder.state_dict(),
            "key_projection": (c.key_projection.state_dict()
                               if c.key_projection is not None else None),
            "queue": c.queue,
            "queue_ptr": c.queue_ptr,
            "filled": c.filled,
            "momentum": c.momentum,
            "temperature": c.temperature,
        }
    if extra:
        payload["extra"] = extra
    torch.save(payload, path)
    sidecar = {
        "architecture": model.encoder.architecture,
        "in_channels": model.encoder.in_channels,
        "embedding_dim": model.encoder.embedding_dim,
        "head": _head_layout(model.head),
        "projection_dim": (model.projection.proj_dim
                           if model.projection is not None else None),
        "queue_size": (model.contrastive.queue.shape[0]
                       if model.contrastive is not None else None),
        "task_index": task_index,
        "encoder_checksum": encoder_checksum(model.encoder),
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)


def load_checkpoint(path: str) -> Tuple[ModelState, dict]:
    """Rebuild a ModelState from a checkpoint plus its sidecar."""
    with open(path + ".json") as f:
        sidecar = json.load(f)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    encoder = build_encoder(sidecar["architecture"], sidecar["in_channels"])
    encoder.load_state_dict(payload["encoder"])
    head = None
    layout = sidecar["head"]
    if layout["kind"] == "single":
        head = SingleHead(encoder.embedding_dim, layout["class_ids"])
        head.load_state_dict(payload["head"])
    elif layout["kind"] == "per_task":
        head = MultiHead(encoder.embedding_dim)
        for t, cs in sorted(layout["task_classes"].items(), key=lambda kv: int(kv[0])):
            head.add_task(int(t), cs)
        head.load_state_dict(payload["head"])
    projection = None
    if sidecar["projection_dim"] is not None:
        projection = ProjectionHead(encoder.embedding_dim, sidecar["projection_dim"])
        projection.load_state_dict(payload["projection"])
    contrastive = None
    if "contrastive" in payload:
        c = payload["contrastive"]
        key_encoder = build_encoder(sidecar["architecture"], sidecar["in_channels"])
        key_encoder.load_state_dict(c["key_encoder"])
        key_projection = None
        if c["key_projection"] is not None:
            key_projection = ProjectionHead(encoder.embedding_dim,
                                            sidecar["projection_dim"])
            key_projection.load_state_dict(c["key_projection"])
        contrastive = ContrastiveState(
            key_encoder, key_projection, c["queue"], c["queue_ptr"],
            c["filled"], c["momentum"], c["temperature"])
        for p in contrastive.key_encoder.parameters():
            p.requires_grad_(False)
        if contrastive.key_projection is not None:
            for p in contrastive.key_projection.parameters():
                p.requires_grad_(False)
    model = ModelState(encoder, head, projection, contrastive)
    # checkpoints hand evaluation-ready modules; trainers flip back to train
    for mod in model.modules().values():
        mod.eval()
    return model, payload.get("extra") or {}
