import os
import tempfile
from unittest import TestCase
from unittest.mock import MagicMock

import numpy as np
from opentelemetry.metrics._internal.instrument import Histogram

from src.dao.checkpoint_repository import CheckpointRepository, CheckpointRepositoryException
from src.dao.experiment_config import ExperimentConfig
from src.model.tokenmixer import TokenMixerModel

EXPERIMENT_FILE = "tests/dao/test_experiment.toml"


def _model(config: ExperimentConfig, seed: int) -> TokenMixerModel:
    return TokenMixerModel(config.features, config.model_config, config.moe_config, seed=seed, dtype=config.dtype)


class TestCheckpointRepository(TestCase):
    def test_save_then_load_should_restore_every_parameter(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        model = _model(config, seed=99)
        ids = np.zeros((2, 4), dtype=np.int64)

        #when
        with tempfile.TemporaryDirectory() as directory:
            under_test = CheckpointRepository(directory)
            path = under_test.save(model, config, step=12)
            checkpoint = under_test.load(path)

        #then
        self.assertEqual(checkpoint.step, 12)
        self.assertEqual(checkpoint.config.fingerprint, config.fingerprint)
        for key, param in model.named_parameters().items():
            np.testing.assert_array_equal(checkpoint.model.named_parameters()[key].data, param.data)
        np.testing.assert_array_equal(checkpoint.model.forward(ids).logits.data, model.forward(ids).logits.data)

    def test_save_should_record_the_duration_to_the_histogram(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        histogram = MagicMock(Histogram)

        #when
        with tempfile.TemporaryDirectory() as directory:
            CheckpointRepository(directory, histogram=histogram).save(_model(config, seed=0), config, step=0)

        #then
        histogram.record.assert_called_once()
        attributes = histogram.record.call_args.kwargs["attributes"]
        self.assertEqual(attributes["tokenmixer.checkpoint.method"], "save")
        self.assertTrue(attributes["tokenmixer.checkpoint.success"])

    def test_load_should_record_a_failure_and_raise_for_a_missing_file(self):
        #given
        histogram = MagicMock(Histogram)

        #when
        with tempfile.TemporaryDirectory() as directory:
            under_test = CheckpointRepository(directory, histogram=histogram)
            with self.assertRaises(CheckpointRepositoryException):
                under_test.load(os.path.join(directory, "missing.npz"))

        #then
        attributes = histogram.record.call_args.kwargs["attributes"]
        self.assertFalse(attributes["tokenmixer.checkpoint.success"])

    def test_load_should_raise_when_parameters_do_not_fit_the_model(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        wider = config.with_overrides({"model.dim": 16})

        #when
        with tempfile.TemporaryDirectory() as directory:
            under_test = CheckpointRepository(directory)
            path = under_test.save(_model(wider, seed=0), config, step=0)

            #then
            with self.assertRaises(CheckpointRepositoryException):
                under_test.load(path)

    def test_save_should_survive_a_failing_histogram(self):
        #given
        config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        histogram = MagicMock(Histogram)
        histogram.record.side_effect = RuntimeError("exporter down")

        #when
        with tempfile.TemporaryDirectory() as directory:
            path = CheckpointRepository(directory, histogram=histogram).save(_model(config, seed=0), config, step=1)

            #then
            self.assertTrue(os.path.exists(path))
