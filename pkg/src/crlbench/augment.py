"""View policies applied to images before they reach a trainer.

Three policies exist: ``ce_standard`` (one stochastically transformed
image for classifier training), ``contrastive_two_view`` (two independent
stronger views of the same image), and ``eval_none`` (the deterministic
image used at evaluation time).
"""
from __future__ import annotations

from typing import Tuple, Union

import numpy as np

from .data import LabeledExample
from .errors import ConfigurationError

VIEW_POLICIES = ("ce_standard", "contrastive_two_view", "eval_none")


def _pad_crop(img: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    top = int(rng.integers(0, 2 * pad + 1))
    left = int(rng.integers(0, 2 * pad + 1))
    return padded[top:top + h, left:left + w]


def _maybe_flip(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    if rng.random() < 0.5:
        return img[:, ::-1]
    return img


def _color_jitter(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = img * rng.uniform(0.75, 1.25)                       # brightness
    mean = out.mean()
    out = (out - mean) * rng.uniform(0.75, 1.25) + mean       # contrast
    if rng.random() < 0.2:                                    # grayscale
        out = np.repeat(out.mean(axis=2, keepdims=True), out.shape[2], axis=2)
    return out


def _standard_view(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = _maybe_flip(_pad_crop(img, 2, rng), rng)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def _contrastive_view(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = _color_jitter(_maybe_flip(_pad_crop(img, 3, rng), rng), rng)
    return np.ascontiguousarray(np.clip(out, 0.0, 1.0), dtype=np.float32)


def augment(
    example: Union[LabeledExample, np.ndarray],
    view_policy: str,
    rng: np.random.Generator = None,
) -> Union[np.ndarray, Tuple[np.ndarray, np.ndarray]]:
    """Apply a view policy to one image.

    Returns one image for ``ce_standard`` and ``eval_none``, and a pair of
    independently transformed views for ``contrastive_two_view``.
    """
    img = example.image if isinstance(example, LabeledExample) else example
    if view_policy == "eval_none":
        return np.asarray(img, dtype=np.float32)
    if rng is None:
        raise ConfigurationError(f"policy {view_policy!r} needs an rng")
    if view_policy == "ce_standard":
        return _standard_view(img, rng)
    if view_policy == "contrastive_two_view":
        return _contrastive_view(img, rng), _contrastive_view(img, rng)
    raise ConfigurationError(
        f"unknown view policy {view_policy!r}; expected one of {VIEW_POLICIES}")
