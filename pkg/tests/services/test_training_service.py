import os
import tempfile
import unittest
from unittest import TestCase
from unittest.mock import MagicMock

import numpy as np
from opentelemetry.metrics._internal.instrument import Histogram

from src.dao.experiment_config import ExperimentConfig
from src.dao.run_record_repository import RunRecordRepository
from src.dao.synthetic_data import generate_splits
from src.model.tensor import Tensor
from src.services.training_service import (
    AdagradState, RunReport, TrainingDivergedError, TrainingService, adagrad_step
)

EXPERIMENT_FILE = "tests/dao/test_experiment.toml"


class TestAdagrad(TestCase):
    def test_adagrad_step_should_scale_by_accumulated_squared_gradients(self):
        #given
        param = Tensor(np.zeros(1), requires_grad=True)
        state = AdagradState()

        #when
        adagrad_step([param], [np.ones(1)], state, lr=0.01)
        first = param.data.copy()
        adagrad_step([param], [np.ones(1)], state, lr=0.01)

        #then
        np.testing.assert_allclose(first, [-0.01], rtol=1e-8)
        np.testing.assert_allclose(param.data - first, [-0.01 / np.sqrt(2.0)], rtol=1e-8)

    def test_adagrad_step_should_reject_non_finite_gradients_as_a_whole(self):
        #given
        params = [Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)]
        state = AdagradState()

        #when
        applied = adagrad_step(params, [np.ones(2), np.array([1.0, np.nan])], state, lr=0.1)

        #then
        self.assertFalse(applied)
        self.assertEqual(state.rejected_steps, 1)
        np.testing.assert_array_equal(params[0].data, [1.0, 1.0])
        self.assertEqual(state.accumulators, {})

    def test_adagrad_step_should_keep_parameters_with_zero_learning_rate(self):
        #given
        param = Tensor(np.array([0.5, -0.5]), requires_grad=True)

        #when
        applied = adagrad_step([param], [np.array([3.0, -2.0])], AdagradState(), lr=0.0)

        #then
        self.assertTrue(applied)
        np.testing.assert_array_equal(param.data, [0.5, -0.5])

    def test_adagrad_step_should_skip_parameters_without_gradient(self):
        #given
        param = Tensor(np.ones(2), requires_grad=True)
        state = AdagradState()

        #when
        adagrad_step([param], [None], state, lr=0.1)

        #then
        np.testing.assert_array_equal(param.data, [1.0, 1.0])
        self.assertEqual(state.accumulators, {})


class TestTrainingService(TestCase):
    def test_train_should_be_deterministic_for_a_configuration(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)

        #when
        first, _ = TrainingService(config).train()
        second, _ = TrainingService(config).train()

        #then
        self.assertEqual(first.to_dict(), second.to_dict())

    def test_train_should_report_one_eval_point_per_epoch(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE).with_overrides({"train.epochs": 2})

        #when
        report, model = TrainingService(config).train()

        #then
        self.assertEqual([point["step"] for point in report.trajectory], [4, 8])
        self.assertEqual(report.steps, 8)
        self.assertEqual(report.rejected_steps, 0)
        self.assertEqual(len(report.epoch_losses), 2)
        self.assertEqual(report.parameters_total, model.parameter_count()[0])
        self.assertGreater(report.ceiling_auc, 0.5)

    def test_train_should_evaluate_every_configured_step(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE).with_overrides({"train.eval_every": 3})

        #when
        report, _ = TrainingService(config).train()

        #then
        self.assertEqual([point["step"] for point in report.trajectory], [3, 4])

    def test_train_should_write_metrics_and_the_report(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)

        #when
        with tempfile.TemporaryDirectory() as directory:
            records = RunRecordRepository(directory)
            report, _ = TrainingService(config, run_records=records).train()

            #then
            self.assertEqual(records.read_metrics(), report.trajectory)
            saved = RunRecordRepository.load_report(os.path.join(directory, "report.json"))
            self.assertEqual(RunReport.from_dict(saved), report)

    def test_step_should_record_its_duration_to_the_histogram(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        histogram = MagicMock(Histogram)
        under_test = TrainingService(config, histogram=histogram)
        train, _ = generate_splits(config.synthetic_spec)

        #when
        under_test.step(under_test.build_model(), train.ids[:8], train.labels[:8], AdagradState(), AdagradState())

        #then
        attributes = histogram.record.call_args.kwargs["attributes"]
        self.assertEqual(attributes["tokenmixer.train.method"], "step")
        self.assertTrue(attributes["tokenmixer.train.success"])

    def test_step_should_raise_with_layer_norms_when_the_forward_pass_diverges(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        under_test = TrainingService(config)
        model = under_test.build_model()
        model.head.weight.data[...] = np.inf
        train, _ = generate_splits(config.synthetic_spec)

        #when
        with self.assertRaises(TrainingDivergedError) as context:
            under_test.step(model, train.ids[:8], train.labels[:8], AdagradState(), AdagradState())

        #then
        self.assertEqual(len(context.exception.layer_norms), 4)

    def test_token_parallel_step_should_match_the_serial_step(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        serial = TrainingService(config)
        parallel = TrainingService(config.with_overrides({"train.token_parallel": 2}))
        train, _ = generate_splits(config.synthetic_spec)
        ids, labels = train.ids[:16], train.labels[:16]
        serial_model, parallel_model = serial.build_model(), parallel.build_model()

        #when
        serial_loss = serial.step(serial_model, ids, labels, AdagradState(), AdagradState())
        parallel_loss = parallel.step(parallel_model, ids, labels, AdagradState(), AdagradState())

        #then
        self.assertAlmostEqual(serial_loss, parallel_loss, delta=1e-8)
        parallel_params = parallel_model.named_parameters()
        for key, param in serial_model.named_parameters().items():
            np.testing.assert_allclose(parallel_params[key].data, param.data, rtol=0, atol=1e-8)

    def test_token_parallel_forward_should_run_leftover_rows_serially(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        parallel = TrainingService(config.with_overrides({"train.token_parallel": 2}))
        model = parallel.build_model()
        ids = generate_splits(config.synthetic_spec)[0].ids[:7]

        #when
        output = parallel.forward(model, ids)

        #then
        np.testing.assert_allclose(output.logits.data, model.forward(ids).logits.data, rtol=0, atol=1e-10)


@unittest.skipUnless(os.getenv("TOKENMIXER_SLOW_TESTS"), "set TOKENMIXER_SLOW_TESTS=1 to train the desk default")
class TestLearnability(TestCase):
    def test_desk_default_should_approach_the_oracle_ceiling(self):
        #given
        config = ExperimentConfig(experiment_file="configs/desk_default.toml")

        for seed in range(5):
            with self.subTest(seed=seed):
                #when
                report, _ = TrainingService(config.with_overrides({"experiment.seed": seed, "train.seed": seed})).train()

                #then
                self.assertGreaterEqual(report.final_auc, 0.97 * report.ceiling_auc)
