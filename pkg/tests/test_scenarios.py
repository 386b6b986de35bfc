from collections import Counter

import numpy as np
import pytest

from crlbench.data import make_synthetic_dataset
from crlbench.errors import ConfigurationError
from crlbench.scenarios import (
    build_class_il,
    build_data_il,
    build_task_il,
    cumulative_test_set,
)

from conftest import fake_source


class TestBuildClassIL:
    def test_ten_by_ten(self, source_100c):
        seq = build_class_il(source_100c, [10] * 10, seed=5)
        assert len(seq) == 10
        assert all(len(t.spec.class_set) == 10 for t in seq.tasks)

    def test_fifty_plus_five_tens(self, source_100c):
        seq = build_class_il(source_100c, [50] + [10] * 5, seed=5)
        assert [len(t.spec.class_set) for t in seq.tasks] == [50, 10, 10, 10, 10, 10]

    def test_single_task_equals_joint(self, source_10c):
        seq = build_class_il(source_10c, [10], seed=1)
        assert sorted(seq.tasks[0].spec.class_set) == list(range(10))
        assert len(seq.tasks[0].train) == len(source_10c.train)
        assert len(seq.tasks[0].test) == len(source_10c.test)

    def test_disjoint_class_sets(self, source_100c):
        seq = build_class_il(source_100c, [10] * 10, seed=2)
        for i in range(len(seq)):
            for j in range(i + 1, len(seq)):
                assert not set(seq.tasks[i].spec.class_set) & set(
                    seq.tasks[j].spec.class_set)

    def test_partition_multiset_equality(self, source_10c):
        seq = build_class_il(source_10c, [2] * 5, seed=9)
        union = Counter()
        for task in seq.tasks:
            union.update(int(i) for i in task.train.indices)
        full = Counter(int(i) for i in source_10c.train.indices)
        assert union == full

    def test_examples_land_with_owning_class(self, source_10c):
        seq = build_class_il(source_10c, [2] * 5, seed=9)
        for task in seq.tasks:
            assert set(int(l) for l in task.train.labels) == set(task.spec.class_set)
            assert set(int(l) for l in task.test.labels) == set(task.spec.class_set)

    def test_deterministic_manifest(self, source_10c):
        a = build_class_il(source_10c, [2] * 5, seed=4).manifest_json()
        b = build_class_il(source_10c, [2] * 5, seed=4).manifest_json()
        assert a == b
        c = build_class_il(source_10c, [2] * 5, seed=5).manifest_json()
        assert a != c

    def test_size_overflow_rejected(self, source_10c):
        with pytest.raises(ConfigurationError):
            build_class_il(source_10c, [6, 6], seed=0)

    def test_empty_task_rejected(self, source_10c):
        with pytest.raises(ConfigurationError):
            build_class_il(source_10c, [5, 0, 5], seed=0)

    def test_task_il_mode_flag(self, source_10c):
        seq = build_task_il(source_10c, [5, 5], seed=0)
        assert seq.mode == "task_il"
        assert all(t.spec.mode == "task_il" for t in seq.tasks)


class TestBuildDataIL:
    def test_even_split_500_per_class(self):
        source = fake_source(num_classes=2, train_per_class=500, test_per_class=20)
        seq = build_data_il(source, 10, seed=3)
        for task in seq.tasks:
            counts = Counter(int(l) for l in task.train.labels)
            assert counts == {0: 50, 1: 50}

    def test_single_task_is_full_dataset(self, source_10c):
        seq = build_data_il(source_10c, 1, seed=3)
        assert len(seq.tasks[0].train) == len(source_10c.train)

    def test_seven_per_class_two_tasks(self):
        # Counting oracle: 7 examples split over 2 tasks must give {3, 4}.
        source = fake_source(num_classes=2, train_per_class=7, test_per_class=2)
        seq = build_data_il(source, 2, seed=11)
        for c in range(2):
            per_task = [int((task.train.labels == c).sum()) for task in seq.tasks]
            assert sorted(per_task) == [3, 4]
            assert sum(per_task) == 7

    def test_all_tasks_have_full_class_set(self, source_10c):
        seq = build_data_il(source_10c, 3, seed=1)
        assert all(t.spec.class_set == tuple(range(10)) for t in seq.tasks)

    def test_balance_within_one(self, source_10c):
        seq = build_data_il(source_10c, 4, seed=8)
        for c in range(10):
            counts = [int((t.train.labels == c).sum()) for t in seq.tasks]
            assert max(counts) - min(counts) <= 1

    def test_partition_exact(self, source_10c):
        seq = build_data_il(source_10c, 3, seed=8)
        union = Counter()
        for task in seq.tasks:
            union.update(int(i) for i in task.train.indices)
        assert union == Counter(int(i) for i in source_10c.train.indices)

    def test_too_many_tasks_rejected(self):
        source = fake_source(num_classes=2, train_per_class=3, test_per_class=2)
        with pytest.raises(ConfigurationError):
            build_data_il(source, 4, seed=0)

    def test_deterministic(self, source_10c):
        a = build_data_il(source_10c, 3, seed=4).manifest_json()
        b = build_data_il(source_10c, 3, seed=4).manifest_json()
        assert a == b


class TestCumulativeTestSet:
    def test_class_il_t3_covers_30_classes(self, source_100c):
        seq = build_class_il(source_100c, [10] * 10, seed=5)
        cum = cumulative_test_set(seq, 3)
        assert len(set(int(l) for l in cum.labels)) == 30

    def test_data_il_always_full(self, source_10c):
        seq = build_data_il(source_10c, 4, seed=5)
        for t in (1, 2, 4):
            assert len(cumulative_test_set(seq, t)) == len(source_10c.test)

    def test_final_t_is_full_in_all_modes(self, source_10c):
        for seq in (build_class_il(source_10c, [2] * 5, seed=1),
                    build_task_il(source_10c, [2] * 5, seed=1),
                    build_data_il(source_10c, 5, seed=1)):
            cum = cumulative_test_set(seq, len(seq))
            assert len(cum) == len(source_10c.test)

    def test_out_of_range_rejected(self, source_10c):
        seq = build_class_il(source_10c, [2] * 5, seed=1)
        with pytest.raises(ValueError):
            cumulative_test_set(seq, 0)
        with pytest.raises(ValueError):
            cumulative_test_set(seq, 6)


class TestSyntheticDataset:
    def test_shapes_and_range(self):
        src = make_synthetic_dataset(num_classes=4, train_per_class=5,
                                     test_per_class=2, image_size=8, seed=0)
        assert src.train.images.shape == (20, 8, 8, 3)
        assert src.train.images.min() >= 0.0 and src.train.images.max() <= 1.0

    def test_deterministic(self):
        a = make_synthetic_dataset(num_classes=3, train_per_class=4,
                                   test_per_class=2, seed=7)
        b = make_synthetic_dataset(num_classes=3, train_per_class=4,
                                   test_per_class=2, seed=7)
        np.testing.assert_array_equal(a.train.images, b.train.images)

    def test_nearest_centroid_separates(self):
        # sanity anchor used by the learner tests: the toy data is separable
        src = make_synthetic_dataset(num_classes=5, train_per_class=20,
                                     test_per_class=10, seed=3)
        centroids = np.stack([
            src.train.images[src.train.labels == c].mean(axis=0).ravel()
            for c in range(5)])
        test_flat = src.test.images.reshape(len(src.test), -1)
        d = ((test_flat[:, None, :] - centroids[None]) ** 2).sum(axis=2)
        acc = (d.argmin(axis=1) == src.test.labels).mean()
        assert acc > 0.8

    def test_blob_family_differs(self):
        g = make_synthetic_dataset(num_classes=3, train_per_class=2,
                                   test_per_class=1, seed=0, family="gratings")
        b = make_synthetic_dataset(num_classes=3, train_per_class=2,
                                   test_per_class=1, seed=0, family="blobs")
        assert not np.allclose(g.train.images, b.train.images)
