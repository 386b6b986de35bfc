"""Tour of the training objectives and the model-surgery primitives.

Shows each loss on small hand-built tensors, head growth that preserves
old classes, and the momentum-encoder/queue machinery used by the
contrastive trainer.

Run:  python demos/02_losses_and_models.py
"""
import math

import torch
import torch.nn.functional as F

from crlbench import (
    ContrastiveState,
    SingleHead,
    build_encoder,
    ema_update,
    expand_single_head,
    loss_ce,
    loss_infonce,
    loss_ird,
    loss_lwf_kd,
    loss_supcon,
    mas_importance,
    mas_penalty,
    queue_push,
)

torch.manual_seed(0)

# --- cross-entropy sanity anchors -----------------------------------------
print("uniform 4-way CE:", float(loss_ce(torch.zeros(1, 4), torch.tensor([0]))),
      "= ln 4 =", math.log(4))

# --- parameter importance and the drift penalty ----------------------------
model = torch.nn.Linear(3, 2)
omega = mas_importance(model, [torch.randn(8, 3)])
anchor = {n: p.detach().clone() for n, p in model.named_parameters()}
with torch.no_grad():
    model.weight.add_(0.1)
params = dict(model.named_parameters())
print("penalty after drifting weights:",
      float(mas_penalty(params, anchor, omega, lam=1.0).detach()))

# --- temperature-softened distillation -------------------------------------
frozen = torch.tensor([[2.0, 0.0, -1.0]])
current = torch.tensor([[0.5, 0.5, 0.0]])
for temp in (1.0, 2.0, 5.0):
    print(f"distillation loss at T={temp}:",
          round(float(loss_lwf_kd(current, frozen, temp)), 4))

# --- contrastive objectives -------------------------------------------------
feats = F.normalize(torch.randn(8, 16), dim=1)
labels = torch.tensor([0, 0, 1, 1, 2, 2, 3, 3])
print("supcon:", float(loss_supcon(feats, labels, temperature=0.2)))

past = F.normalize(feats + 0.05 * torch.randn_like(feats), dim=1)
print("instance-relation distillation:",
      float(loss_ird(feats, past, 0.2, 0.01)))

query = F.normalize(torch.randn(4, 16), dim=1)
key = F.normalize(query + 0.1 * torch.randn_like(query), dim=1)
queue = F.normalize(torch.randn(32, 16), dim=1)
print("infonce vs 32 negatives:", float(loss_infonce(query, key, queue, 0.2)))

# --- growing a shared head without disturbing old classes ------------------
head = SingleHead(embedding_dim=16, class_ids=[0, 1])
z = torch.randn(2, 16)
before = head(z)[:, :2]
expand_single_head(head, [2, 3])
after = head(z)[:, :2]
print("old-class logits preserved after expansion:",
      bool(torch.allclose(before, after, atol=1e-6)))

# --- momentum encoder and the negative-key queue ----------------------------
encoder = build_encoder("micro")
state = ContrastiveState.create(encoder, None, queue_size=8, momentum=0.99)
with torch.no_grad():
    next(encoder.parameters()).add_(1.0)   # pretend a training step happened
ema_update(state, encoder)
keys = F.normalize(torch.randn(3, encoder.embedding_dim), dim=1)
queue_push(state, keys)
print("queue pointer after one push of 3:", state.queue_ptr)
print("all queue rows unit-norm:",
      bool(torch.allclose(state.queue.norm(dim=1), torch.ones(8), atol=1e-5)))
