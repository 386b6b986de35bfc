"""Named random streams derived from a single root seed.

Every source of randomness in a run (scenario construction, weight init,
batch shuffling, augmentation, probe training, memory eviction, transfer)
draws from its own stream so components can be reproduced in isolation and
a resumed run re-derives exactly the generators an uninterrupted run used.
"""
from __future__ import annotations

import numpy as np

STREAMS = (
    "scenario",
    "init",
    "batching",
    "augmentation",
    "probe",
    "memory",
    "transfer",
    "torch",
)

_STREAM_IDS = {name: i for i, name in enumerate(STREAMS)}


def stream_seed(root_seed: int, stream: str, *context: int) -> int:
    """Deterministic 32-bit seed for ``stream`` under ``root_seed``.

    ``context`` takes integers such as the task index, so per-task
    generators do not depend on how many draws earlier tasks consumed.
    """
    if stream not in _STREAM_IDS:
        raise KeyError(f"unknown seed stream {stream!r}; expected one of {STREAMS}")
    seq = np.random.SeedSequence([int(root_seed), _STREAM_IDS[stream], *map(int, context)])
    return int(seq.generate_state(1, dtype=np.uint32)[0])


def stream_rng(root_seed: int, stream: str, *context: int) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root_seed, stream, *context))
