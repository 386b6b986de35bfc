import json

import numpy as np
import pytest
import torch

from crlbench.data import make_synthetic_dataset
from crlbench.errors import ConfigurationError, ProtocolError
from crlbench.evaluation import (
    EvalReport,
    ProbeConfig,
    TransferConfig,
    bias_profile,
    downstream_transfer,
    evaluate_accuracy,
    newest_task_mass,
    retrain_output_layer,
)
from crlbench.memory import ExemplarMemory
from crlbench.models import (
    ModelState,
    SingleHead,
    build_encoder,
    encoder_checksum,
)
from crlbench.scenarios import build_class_il, cumulative_test_set
from crlbench.seeding import stream_seed
from crlbench.training import AlgorithmSpec, TrainConfig, joint_learner, train_task


@pytest.fixture(scope="module")
def source():
    return make_synthetic_dataset(num_classes=6, train_per_class=30,
                                  test_per_class=10, image_size=16, seed=4)


@pytest.fixture(scope="module")
def memory_o(source):
    mem = ExemplarMemory(policy="per_class_quota", per_class_quota=10,
                         seed=0).bind(source.train)
    return mem.quota_update(source.train)


@pytest.fixture(scope="module")
def trained(source):
    seq = build_class_il(source, [6], seed=0)
    model = joint_learner(seq.tasks, "micro",
                          AlgorithmSpec(epochs=8, batch_size=32),
                          TrainConfig(), seed=5)
    return model


PROBE = ProbeConfig(epochs=120, lr=0.1)


class TestRetrainOutputLayer:
    def test_encoder_untouched(self, trained, memory_o):
        before = encoder_checksum(trained.encoder)
        retrain_output_layer(trained.encoder, memory_o, PROBE, seed=1)
        assert encoder_checksum(trained.encoder) == before

    def test_deterministic_head_weights(self, trained, memory_o):
        h1 = retrain_output_layer(trained.encoder, memory_o, PROBE, seed=7)
        h2 = retrain_output_layer(trained.encoder, memory_o, PROBE, seed=7)
        torch.testing.assert_close(h1.fc.weight, h2.fc.weight)
        torch.testing.assert_close(h1.fc.bias, h2.fc.bias)

    def test_random_encoder_scores_near_chance(self, source, memory_o):
        torch.manual_seed(0)
        enc = build_encoder("micro")
        head = retrain_output_layer(enc, memory_o, PROBE, seed=1)
        acc = evaluate_accuracy(enc, head, source.test)
        assert acc < 0.35            # chance is 1/6

    def test_quota_probe_close_to_full_data_probe(self, trained, source):
        full = ExemplarMemory(policy="per_class_quota", per_class_quota=30,
                              seed=0).bind(source.train)
        full.quota_update(source.train)
        small = ExemplarMemory(policy="per_class_quota", per_class_quota=10,
                               seed=0).bind(source.train)
        small.quota_update(source.train)
        acc_small = evaluate_accuracy(
            trained.encoder,
            retrain_output_layer(trained.encoder, small, PROBE, seed=2),
            source.test)
        acc_full = evaluate_accuracy(
            trained.encoder,
            retrain_output_layer(trained.encoder, full, PROBE, seed=2),
            source.test)
        assert acc_full - acc_small < 0.08   # measured gap, desk scale

    def test_missing_classes_logged(self, trained, source, caplog):
        partial = ExemplarMemory(policy="per_class_quota", per_class_quota=5,
                                 seed=0).bind(source.train)
        half = source.train.subset(np.nonzero(source.train.labels < 3)[0])
        partial.quota_update(half)
        with caplog.at_level("WARNING"):
            retrain_output_layer(trained.encoder, partial, PROBE, seed=1,
                                 expected_classes=range(6))
        assert any("lacks classes" in r.message for r in caplog.records)

    def test_empty_memory_rejected(self, trained, source):
        empty = ExemplarMemory(policy="per_class_quota", per_class_quota=5,
                               seed=0).bind(source.train)
        with pytest.raises(ProtocolError):
            retrain_output_layer(trained.encoder, empty, PROBE, seed=1)


class TestEvaluateAccuracy:
    def test_memorizer_scores_one_on_train_set(self, source):
        small = source.train.subset(range(0, len(source.train), 5))
        seq = build_class_il(
            type(source)("sub", small, small), [6], seed=0)
        model = joint_learner(seq.tasks, "micro",
                              AlgorithmSpec(epochs=25, batch_size=16, lr=0.05),
                              TrainConfig(), seed=6)
        acc = evaluate_accuracy(model.encoder, model.head, small)
        assert acc == 1.0

    def test_constant_predictor_scores_one_over_k(self, source):
        torch.manual_seed(1)
        enc = build_encoder("micro")
        head = SingleHead(enc.embedding_dim, range(6))
        with torch.no_grad():
            head.fc.weight.zero_()
            head.fc.bias.zero_()
            head.fc.bias[2] = 100.0      # always predicts class 2
        acc = evaluate_accuracy(enc, head, source.test)
        assert abs(acc - 1 / 6) < 1e-9

    def test_task_id_at_test_time_never_hurts(self, source):
        seq = build_class_il(source, [2, 2, 2], seed=3)
        model = None
        reg = None
        spec = AlgorithmSpec(epochs=4, batch_size=16)
        for t, task in enumerate(seq.tasks, 1):
            if model is None:
                torch.manual_seed(stream_seed(11, "init"))
                model = ModelState(build_encoder("micro"))
            model, reg = train_task(model, task, None, spec, TrainConfig(), 11,
                                    reg_state=reg,
                                    task_class_sets=seq.task_class_sets[:t])
        cum = cumulative_test_set(seq, 3)
        acc_class = evaluate_accuracy(model.encoder, model.head, cum,
                                      mode="class_il")
        acc_task = evaluate_accuracy(model.encoder, model.head, cum,
                                     mode="task_il",
                                     task_class_sets=seq.task_class_sets)
        assert acc_task >= acc_class

    def test_class_absent_from_head_counts_wrong(self, source, caplog):
        torch.manual_seed(2)
        enc = build_encoder("micro")
        head = SingleHead(enc.embedding_dim, range(3))   # misses classes 3..5
        with caplog.at_level("WARNING"):
            acc = evaluate_accuracy(enc, head, source.test)
        assert acc <= 0.5
        assert any("absent from head" in r.message for r in caplog.records)

    def test_task_il_needs_class_sets(self, source, trained):
        with pytest.raises(ProtocolError):
            evaluate_accuracy(trained.encoder, trained.head, source.test,
                              mode="task_il")


class TestBiasProfile:
    def test_rows_stochastic(self, trained, source):
        seq = build_class_il(source, [3, 3], seed=2)
        cum = cumulative_test_set(seq, 2)
        conf = bias_profile(trained.encoder, trained.head, cum,
                            seq.task_class_sets)
        np.testing.assert_allclose(conf.sum(axis=1), np.ones(2), atol=1e-6)

    def test_single_task_profile_is_identity(self, trained, source):
        seq = build_class_il(source, [6], seed=0)
        conf = bias_profile(trained.encoder, trained.head, source.test,
                            seq.task_class_sets)
        np.testing.assert_allclose(conf, [[1.0]])
        assert newest_task_mass(conf) == 0.0

    def test_finetuned_model_routes_mass_to_newest_task(self, source):
        seq = build_class_il(source, [3, 3], seed=2)
        spec = AlgorithmSpec(epochs=8, batch_size=16)
        model, reg = None, None
        for t, task in enumerate(seq.tasks, 1):
            if model is None:
                torch.manual_seed(stream_seed(9, "init"))
                model = ModelState(build_encoder("micro"))
            model, reg = train_task(model, task, None, spec, TrainConfig(), 9,
                                    reg_state=reg,
                                    task_class_sets=seq.task_class_sets[:t])
        cum = cumulative_test_set(seq, 2)
        conf = bias_profile(model.encoder, model.head, cum, seq.task_class_sets)
        assert conf[0, 1] > 0.5   # old-task rows drain into the newest column
        mo = ExemplarMemory(policy="per_class_quota", per_class_quota=10,
                            seed=0).bind(source.train)
        mo.quota_update(source.train)
        probe = retrain_output_layer(model.encoder, mo, PROBE, seed=3)
        conf_gd = bias_profile(model.encoder, probe, cum, seq.task_class_sets)
        assert newest_task_mass(conf_gd) < newest_task_mass(conf)


class TestDownstreamTransfer:
    def test_trained_encoder_beats_random(self, trained):
        # read-out transfer to unseen same-family classes isolates the
        # representation; fine-tuning budgets small enough not to saturate
        # are too noisy for a strict paired comparison at this scale
        downstream = make_synthetic_dataset(num_classes=8, train_per_class=10,
                                            test_per_class=15, image_size=16,
                                            seed=99, family="gratings")
        cfg = TransferConfig(epochs=20, lr=0.05, batch_size=32,
                             finetune_encoder=False)
        acc_trained = downstream_transfer(trained.encoder, downstream, cfg,
                                          seed=1)
        torch.manual_seed(3)
        random_enc = build_encoder("micro")
        acc_random = downstream_transfer(random_enc, downstream, cfg, seed=1)
        assert acc_trained > acc_random

    def test_zero_epochs_frozen_encoder_scores_chance(self, trained):
        downstream = make_synthetic_dataset(num_classes=10, train_per_class=5,
                                            test_per_class=20, image_size=16,
                                            seed=10, family="blobs")
        cfg = TransferConfig(epochs=0, finetune_encoder=False)
        acc = downstream_transfer(trained.encoder, downstream, cfg, seed=2)
        assert acc < 0.3      # untrained fresh head, chance is 0.1

    def test_deterministic(self, trained):
        downstream = make_synthetic_dataset(num_classes=3, train_per_class=10,
                                            test_per_class=6, image_size=16,
                                            seed=11, family="blobs")
        cfg = TransferConfig(epochs=1, batch_size=8)
        a = downstream_transfer(trained.encoder, downstream, cfg, seed=4)
        b = downstream_transfer(trained.encoder, downstream, cfg, seed=4)
        assert a == b

    def test_source_encoder_never_mutates(self, trained):
        downstream = make_synthetic_dataset(num_classes=3, train_per_class=10,
                                            test_per_class=6, image_size=16,
                                            seed=12, family="blobs")
        before = encoder_checksum(trained.encoder)
        downstream_transfer(trained.encoder, downstream,
                            TransferConfig(epochs=1, batch_size=8), seed=5)
        assert encoder_checksum(trained.encoder) == before

    def test_label_space_collision_rejected(self, trained):
        downstream = make_synthetic_dataset(num_classes=3, train_per_class=4,
                                            test_per_class=2, seed=13)
        cfg = TransferConfig(expected_classes=7)
        with pytest.raises(ConfigurationError):
            downstream_transfer(trained.encoder, downstream, cfg, seed=0)


class TestEvalReport:
    def test_json_roundtrip(self):
        rep = EvalReport(task_index=2, gd_accuracy=0.8, raw_accuracy=0.5,
                         bias_gap=0.3, task_confusion=[[0.7, 0.3], [0.1, 0.9]],
                         task_confusion_gd=[[0.9, 0.1], [0.2, 0.8]],
                         downstream={"blobs": 0.6}, scenario="x/class_il",
                         seed=3)
        again = EvalReport.from_json(rep.to_json())
        assert again == rep

    def test_accuracy_bounds_enforced(self):
        with pytest.raises(ValueError):
            EvalReport(task_index=1, gd_accuracy=1.2)

    def test_confusion_rows_must_sum_to_one(self):
        with pytest.raises(ValueError):
            EvalReport(task_index=1, gd_accuracy=0.5,
                       task_confusion=[[0.5, 0.2], [0.1, 0.9]])
