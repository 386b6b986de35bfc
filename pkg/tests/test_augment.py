import numpy as np
import pytest

from crlbench.augment import augment
from crlbench.errors import ConfigurationError


@pytest.fixture
def image():
    rng = np.random.default_rng(0)
    return rng.random((16, 16, 3)).astype(np.float32)


def test_eval_none_is_identity_and_repeatable(image):
    a = augment(image, "eval_none")
    b = augment(image, "eval_none")
    np.testing.assert_array_equal(a, image)
    np.testing.assert_array_equal(a, b)


def test_two_views_almost_surely_distinct(image):
    rng = np.random.default_rng(1)
    distinct = 0
    for _ in range(100):
        v1, v2 = augment(image, "contrastive_two_view", rng)
        if np.abs(v1 - v2).sum() > 0:
            distinct += 1
    assert distinct == 100


def test_ce_standard_seeded_reproducible(image):
    a = augment(image, "ce_standard", np.random.default_rng(42))
    b = augment(image, "ce_standard", np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)


def test_views_stay_in_range_and_shape(image):
    rng = np.random.default_rng(2)
    for _ in range(20):
        v = augment(image, "ce_standard", rng)
        assert v.shape == image.shape
        assert v.min() >= 0.0 and v.max() <= 1.0
        v1, v2 = augment(image, "contrastive_two_view", rng)
        for v in (v1, v2):
            assert v.shape == image.shape
            assert v.min() >= 0.0 and v.max() <= 1.0


def test_unknown_policy_rejected(image):
    with pytest.raises(ConfigurationError):
        augment(image, "mixup", np.random.default_rng(0))


def test_stochastic_policy_without_rng_rejected(image):
    with pytest.raises(ConfigurationError):
        augment(image, "ce_standard")
