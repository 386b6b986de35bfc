"""Dataset layer: in-memory array datasets, synthetic generators, folder IO.

Images are float32 arrays of shape (H, W, C) with values in [0, 1]. Labels
are integer class ids; every example carries a stable integer ``index``
into its source split so exemplar memories can store references instead of
pixels.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigurationError

IMAGE_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class LabeledExample:
    """One (image, label) pair with its stable id in the source split."""

    image: np.ndarray
    label: Optional[int]
    index: int


class ArrayDataset:
    """Dense image dataset with stable per-example indices.

    Subsets keep the original indices and the global label space, so an
    index stored by a memory always resolves against the source split.
    """

    def __init__(
        self,
        images: np.ndarray,
        labels: Optional[np.ndarray],
        num_classes: int,
        indices: Optional[np.ndarray] = None,
        class_names: Optional[Sequence[str]] = None,
        name: str = "dataset",
    ):
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4:
            raise ConfigurationError(f"images must be (N,H,W,C), got shape {images.shape}")
        self.images = images
        self.num_classes = int(num_classes)
        self.name = name
        if labels is None:
            self.labels = None
        else:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (len(images),):
                raise ConfigurationError("labels must be one integer per image")
            if len(labels) and (labels.min() < 0 or labels.max() >= num_classes):
                raise ConfigurationError("labels outside [0, num_classes)")
            self.labels = labels
        if indices is None:
            indices = np.arange(len(images), dtype=np.int64)
        else:
            indices = np.asarray(indices, dtype=np.int64)
            if len(np.unique(indices)) != len(indices):
                raise ConfigurationError("example indices must be unique")
        self.indices = indices
        self.class_names = list(class_names) if class_names is not None else None

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, i: int) -> LabeledExample:
        label = None if self.labels is None else int(self.labels[i])
        return LabeledExample(self.images[i], label, int(self.indices[i]))

    def __iter__(self) -> Iterator[LabeledExample]:
        for i in range(len(self)):
            yield self[i]

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, positions: Sequence[int], name: Optional[str] = None) -> "ArrayDataset":
        positions = np.asarray(positions, dtype=np.int64)
        return ArrayDataset(
            self.images[positions],
            None if self.labels is None else self.labels[positions],
            self.num_classes,
            indices=self.indices[positions],
            class_names=self.class_names,
            name=name or self.name,
        )

    def by_index(self, index: int) -> LabeledExample:
        """Resolve an example by its stable source index."""
        pos = self._index_map().get(int(index))
        if pos is None:
            raise KeyError(f"index {index} not present in {self.name}")
        return self[pos]

    def _index_map(self) -> dict:
        cached = getattr(self, "_idx_map", None)
        if cached is None:
            cached = {int(ix): pos for pos, ix in enumerate(self.indices)}
            self._idx_map = cached
        return cached

    def positions_of_class(self, class_id: int) -> np.ndarray:
        if self.labels is None:
            raise ConfigurationError("dataset carries no labels")
        return np.nonzero(self.labels == class_id)[0]

    def unlabeled(self) -> "ArrayDataset":
        """View with labels hidden, for handing to unsupervised trainers."""
        return ArrayDataset(
            self.images, None, self.num_classes,
            indices=self.indices, class_names=self.class_names, name=self.name,
        )


@dataclass
class SourceDataset:
    """A train/test split pair over one label space."""

    name: str
    train: ArrayDataset
    test: ArrayDataset

    def __post_init__(self):
        if self.train.num_classes != self.test.num_classes:
            raise ConfigurationError("train/test label spaces differ")

    @property
    def num_classes(self) -> int:
        return self.train.num_classes


def concat_datasets(parts: Sequence[ArrayDataset], name: str = "concat") -> ArrayDataset:
    """Concatenate splits over the same source; indices must stay unique."""
    if not parts:
        raise ConfigurationError("nothing to concatenate")
    num_classes = parts[0].num_classes
    labels = None
    if all(p.labels is not None for p in parts):
        labels = np.concatenate([p.labels for p in parts])
    return ArrayDataset(
        np.concatenate([p.images for p in parts]),
        labels,
        num_classes,
        indices=np.concatenate([p.indices for p in parts]),
        class_names=parts[0].class_names,
        name=name,
    )


# ---------------------------------------------------------------------------
# Synthetic desk-scale datasets
# ---------------------------------------------------------------------------

def _grating_prototype(num_classes: int, image_size: int, rng: np.random.Generator):
    """Per-class orientation/frequency/phase/color for the grating family."""
    thetas = np.pi * (np.arange(num_classes) + 0.13) / num_classes
    freqs = 1.5 + 2.5 * ((np.arange(num_classes) * 0.618) % 1.0)
    phases = rng.uniform(0, 2 * np.pi, size=num_classes)
    colors = rng.uniform(0.35, 1.0, size=(num_classes, 3))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    return thetas, freqs, phases, colors


def _render_grating(theta, freq, phase, color, image_size, shift, noise, bright, rng):
    ax = np.linspace(0.0, 1.0, image_size, endpoint=False)
    xx, yy = np.meshgrid(ax + shift[0], ax + shift[1], indexing="xy")
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    img = 0.5 + 0.35 * wave[..., None] * color[None, None, :]
    img = img * bright + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _blob_prototype(num_classes: int, rng: np.random.Generator):
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    radii = 0.28 + 0.10 * ((np.arange(num_classes) % 3) / 2.0)
    centers = 0.5 + radii[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    sigmas = 0.10 + 0.06 * ((np.arange(num_classes) * 0.37) % 1.0)
    colors = rng.uniform(0.35, 1.0, size=(num_classes, 3))
    colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    return centers, sigmas, colors


def _render_blob(center, sigma, color, image_size, jitter, noise, bright, rng):
    ax = np.linspace(0.0, 1.0, image_size, endpoint=False)
    xx, yy = np.meshgrid(ax, ax, indexing="xy")
    r2 = (xx - center[0] - jitter[0]) ** 2 + (yy - center[1] - jitter[1]) ** 2
    bump = np.exp(-r2 / (2 * sigma**2))
    img = 0.15 + 0.8 * bump[..., None] * color[None, None, :]
    img = img * bright + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_synthetic_dataset(
    num_classes: int = 10,
    train_per_class: int = 100,
    test_per_class: int = 20,
    image_size: int = 16,
    seed: int = 0,
    family: str = "gratings",
    name: Optional[str] = None,
) -> SourceDataset:
    """Procedural image classification dataset for desk-scale runs.

    ``gratings`` draws class-specific oriented sinusoids, ``blobs`` draws
    class-specific colored bumps; both are learnable by a small CNN and
    separable by a nearest-centroid baseline, with per-example jitter,
    noise and brightness variation so the task is not pixel matching.
    """
    if family not in ("gratings", "blobs"):
        raise ConfigurationError(f"unknown synthetic family {family!r}")
    rng = np.random.default_rng(seed)
    if family == "gratings":
        protos = _grating_prototype(num_classes, image_size, rng)
    else:
        protos = _blob_prototype(num_classes, rng)

    def render_split(per_class: int, split_rng: np.random.Generator) -> ArrayDataset:
        images, labels = [], []
        for c in range(num_classes):
            for _ in range(per_class):
                shift = split_rng.uniform(-0.04, 0.04, size=2)
                bright = split_rng.uniform(0.9, 1.1)
                if family == "gratings":
                    thetas, freqs, phases, colors = protos
                    img = _render_grating(
                        thetas[c], freqs[c], phases[c], colors[c],
                        image_size, shift, 0.06, bright, split_rng,
                    )
                else:
                    centers, sigmas, colors = protos
                    img = _render_blob(
                        centers[c], sigmas[c], colors[c],
                        image_size, shift, 0.06, bright, split_rng,
                    )
                images.append(img)
                labels.append(c)
        return ArrayDataset(np.stack(images), np.array(labels), num_classes)

    ds_name = name or f"synthetic-{family}-{num_classes}c-s{seed}"
    train = render_split(train_per_class, np.random.default_rng(rng.integers(2**31)))
    test = render_split(test_per_class, np.random.default_rng(rng.integers(2**31)))
    train.name = f"{ds_name}/train"
    test.name = f"{ds_name}/test"
    return SourceDataset(ds_name, train, test)


# ---------------------------------------------------------------------------
# Image-folder convention: <root>/<split>/<class_name>/<image files>
# ---------------------------------------------------------------------------

def write_image_folder(source: SourceDataset, root: str) -> None:
    """Materialize a dataset under the on-disk folder convention."""
    from PIL import Image

    for split_name, split in (("train", source.train), ("test", source.test)):
        if split.labels is None:
            raise ConfigurationError("cannot write an unlabeled split")
        for pos in range(len(split)):
            c = int(split.labels[pos])
            cname = (split.class_names[c] if split.class_names
                     else f"class_{c:03d}")
            d = os.path.join(root, split_name, cname)
            os.makedirs(d, exist_ok=True)
            arr = np.clip(split.images[pos] * 255.0, 0, 255).round().astype(np.uint8)
            Image.fromarray(arr).save(
                os.path.join(d, f"{int(split.indices[pos]):06d}.png"))


def load_image_folder(root: str, name: Optional[str] = None) -> SourceDataset:
    """Load a dataset laid out as <root>/<split>/<class_name>/<images>."""
    from PIL import Image

    splits = {}
    class_names = None
    for split_name in ("train", "test"):
        split_dir = os.path.join(root, split_name)
        if not os.path.isdir(split_dir):
            raise ConfigurationError(f"missing split directory {split_dir}")
        names = sorted(
            d for d in os.listdir(split_dir)
            if os.path.isdir(os.path.join(split_dir, d)))
        if class_names is None:
            class_names = names
        elif names != class_names:
            raise ConfigurationError("train/test class directories differ")
        images, labels = [], []
        for label, cname in enumerate(names):
            cdir = os.path.join(split_dir, cname)
            for fname in sorted(os.listdir(cdir)):
                with Image.open(os.path.join(cdir, fname)) as im:
                    images.append(
                        np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0)
                labels.append(label)
        splits[split_name] = ArrayDataset(
            np.stack(images), np.array(labels), len(names),
            class_names=names, name=f"{root}/{split_name}")
    return SourceDataset(name or os.path.basename(root.rstrip(os.sep)) or root,
                         splits["train"], splits["test"])
