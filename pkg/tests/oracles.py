"""Independent brute-force oracles shared by the loss and acceptance tests.

Everything here reimplements the target quantity from its formula with
explicit Python loops over math.exp/log, deliberately sharing no code
with the package under test.
"""
import math

import numpy as np
import torch


def oracle_softmax(row):
    m = max(row)
    exps = [math.exp(v - m) for v in row]
    s = sum(exps)
    return [v / s for v in exps]


def oracle_ce(logit_rows, labels):
    total = 0.0
    for row, y in zip(logit_rows, labels):
        total += -math.log(oracle_softmax(row)[y])
    return total / len(labels)


def oracle_kl_softened(p_logits, q_logits, temp):
    p = oracle_softmax([v / temp for v in p_logits])
    q = oracle_softmax([v / temp for v in q_logits])
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))


def oracle_lwf(p_rows, q_rows, temp):
    return sum(oracle_kl_softened(p, q, temp)
               for p, q in zip(p_rows, q_rows)) / len(p_rows)


def oracle_mas_penalty(params, anchor, omega, lam):
    total = 0.0
    for p, a, w in zip(params, anchor, omega):
        total += w * (p - a) ** 2
    return lam * total


def oracle_supcon(features, labels, tau):
    n = len(features)
    dot = [[sum(a * b for a, b in zip(features[i], features[j]))
            for j in range(n)] for i in range(n)]
    total, anchors = 0.0, 0
    for i in range(n):
        positives = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not positives:
            continue
        denom = sum(math.exp(dot[i][a] / tau) for a in range(n) if a != i)
        mean_log = sum(math.log(math.exp(dot[i][p] / tau) / denom)
                       for p in positives) / len(positives)
        total += -mean_log
        anchors += 1
    return total / anchors


def oracle_relation_rows(features, tau):
    n = len(features)
    rows = []
    for i in range(n):
        sims = [sum(a * b for a, b in zip(features[i], features[j])) / tau
                for j in range(n) if j != i]
        rows.append(oracle_softmax(sims))
    return rows


def oracle_ird(cur, past, tau_c, tau_p):
    q_rows = oracle_relation_rows(cur, tau_c)
    p_rows = oracle_relation_rows(past, tau_p)
    total = 0.0
    for p, q in zip(p_rows, q_rows):
        total += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
    return total / len(cur)


def oracle_infonce(queries, pos_keys, queue, tau):
    total = 0.0
    for q, k in zip(queries, pos_keys):
        row = [sum(a * b for a, b in zip(q, k))]
        row += [sum(a * b for a, b in zip(q, neg)) for neg in queue]
        total += -math.log(oracle_softmax([v / tau for v in row])[0])
    return total / len(queries)


def oracle_ssil(logits_cur, labels_cur, logits_mem, labels_mem, boundaries,
                frozen_rows, temp):
    starts = [0] + list(boundaries[:-1])
    blocks = list(zip(starts, boundaries))
    lo, hi = blocks[-1]
    total = sum(-math.log(oracle_softmax(r[lo:hi])[y - lo])
                for r, y in zip(logits_cur, labels_cur))
    for r, y in zip(logits_mem, labels_mem):
        blo, bhi = next(b for b in blocks if b[0] <= y < b[1])
        total += -math.log(oracle_softmax(r[blo:bhi])[y - blo])
    sep = total / (len(logits_cur) + len(logits_mem))
    all_rows = list(logits_cur) + list(logits_mem)
    kd = 0.0
    for blo, bhi in blocks[:-1]:
        kd += sum(oracle_kl_softened(f[blo:bhi], r[blo:bhi], temp)
                  for r, f in zip(all_rows, frozen_rows)) / len(all_rows)
    return sep, kd


def unit(rows):
    arr = np.asarray(rows, dtype=np.float64)
    return (arr / np.linalg.norm(arr, axis=1, keepdims=True)).tolist()


def fd_check(loss_fn, params, eps=1e-6, rtol=1e-3):
    """Central finite differences against autograd, elementwise."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    for p, g in zip(params, grads):
        if g is None:
            continue
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + eps
            hi = loss_fn().item()
            flat[idx] = orig - eps
            lo = loss_fn().item()
            flat[idx] = orig
            numeric = (hi - lo) / (2 * eps)
            analytic = gflat[idx].item()
            tol = max(1e-7, rtol * max(abs(numeric), abs(analytic)))
            assert abs(numeric - analytic) <= tol, (
                f"grad mismatch at {idx}: fd={numeric} autograd={analytic}")
