import numpy as np
import pytest
import torch

from crlbench.data import ArrayDataset, SourceDataset


def fake_source(num_classes=10, train_per_class=6, test_per_class=2, hw=4, seed=0):
    """Tiny random-pixel dataset; content-free, for structural tests."""
    rng = np.random.default_rng(seed)

    def split(per_class):
        n = num_classes * per_class
        images = rng.random((n, hw, hw, 3)).astype(np.float32)
        labels = np.repeat(np.arange(num_classes), per_class)
        return ArrayDataset(images, labels, num_classes)

    return SourceDataset(f"fake-{num_classes}c", split(train_per_class),
                         split(test_per_class))


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(2)


@pytest.fixture
def source_10c():
    return fake_source(num_classes=10)


@pytest.fixture
def source_100c():
    return fake_source(num_classes=100, train_per_class=3, test_per_class=1)
