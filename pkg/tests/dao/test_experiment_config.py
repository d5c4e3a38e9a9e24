import os
import tempfile
from unittest import TestCase

import numpy as np

from src.dao.experiment_config import ConfigError, ExperimentConfig, UnknownToggleError
from src.model.block import ModelConfigError
from src.model.tokenizer import FeatureSpec

EXPERIMENT_FILE = "tests/dao/test_experiment.toml"


class TestExperimentConfig(TestCase):
    def test_experiment_config_should_provide_settings_as_properties(self):
        #given
        under_test = ExperimentConfig(experiment_file=EXPERIMENT_FILE)

        #when
        settings = under_test.settings

        #then
        self.assertEqual(under_test.name, "unit-test")
        self.assertEqual(under_test.seed, 3)
        self.assertEqual(under_test.dtype, np.float64)
        self.assertEqual(under_test.output_dir, "runs/unit-test")
        self.assertEqual(under_test.tokens, 4)
        self.assertEqual(under_test.features[2], FeatureSpec(name="item_category", cardinality=5, emb_dim=2, group=1))
        self.assertEqual(under_test.model_config.init_scales, (1.0, 1.0, 0.1))
        self.assertIsNone(under_test.model_config.aux_layers)
        self.assertEqual(under_test.train_config.batch_size, 64)
        self.assertEqual(under_test.synthetic_spec.cross_pairs, 2)
        self.assertEqual(settings["data"]["seed"], 5)

    def test_experiment_config_should_fill_in_defaults(self):
        #given
        under_test = ExperimentConfig(experiment_file=EXPERIMENT_FILE)

        #then
        self.assertEqual(under_test.model_config.norm, "pre")
        self.assertEqual(under_test.model_config.mix_strategy, "vertical")
        self.assertFalse(under_test.moe_config.enabled)
        self.assertEqual(under_test.moe_config.stages, ("mixing", "reverting"))
        self.assertEqual(under_test.quant_config.granularity, "tensor")

    def test_experiment_config_should_reject_unknown_settings(self):
        #given
        content = ExperimentConfig(experiment_file=EXPERIMENT_FILE).settings
        content["model"]["depth"] = 3

        #when / then
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict(content)

    def test_experiment_config_should_reject_unknown_sections(self):
        #given
        content = ExperimentConfig(experiment_file=EXPERIMENT_FILE).settings
        content["serving"] = {"port": 8080}

        #when / then
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict(content)

    def test_experiment_config_should_raise_for_a_missing_file(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig(experiment_file="tests/dao/does_not_exist.toml")

    def test_experiment_config_should_raise_without_features(self):
        #given
        content = ExperimentConfig(experiment_file=EXPERIMENT_FILE).settings
        content["features"] = []

        #when / then
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_dict(content)

    def test_experiment_config_should_raise_for_an_inconsistent_model(self):
        with self.assertRaises(ModelConfigError):
            ExperimentConfig(experiment_file=EXPERIMENT_FILE).with_overrides({"model.layers": 0})

    def test_with_overrides_should_return_a_new_configuration(self):
        #given
        under_test = ExperimentConfig(experiment_file=EXPERIMENT_FILE)

        #when
        overridden = under_test.with_overrides({"model.norm": "post", "moe.enabled": True})

        #then
        self.assertEqual(overridden.model_config.norm, "post")
        self.assertTrue(overridden.moe_config.enabled)
        self.assertEqual(under_test.model_config.norm, "pre")
        self.assertNotEqual(overridden.fingerprint, under_test.fingerprint)

    def test_with_overrides_should_raise_for_an_unknown_toggle(self):
        #given
        under_test = ExperimentConfig(experiment_file=EXPERIMENT_FILE)

        #when / then
        with self.assertRaises(UnknownToggleError):
            under_test.with_overrides({"model.depth": 3})
        with self.assertRaises(UnknownToggleError):
            under_test.with_overrides({"norm": "post"})

    def test_dump_should_write_a_file_that_loads_back_to_the_same_settings(self):
        #given
        under_test = ExperimentConfig(experiment_file=EXPERIMENT_FILE)

        #when
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, "experiment.toml")
            under_test.dump(path)
            reloaded = ExperimentConfig(experiment_file=path)

        #then
        self.assertEqual(reloaded.settings, under_test.settings)
        self.assertEqual(reloaded.fingerprint, under_test.fingerprint)

    def test_fingerprint_should_be_stable_for_equal_settings(self):
        #given
        first = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        second = ExperimentConfig.from_dict(first.to_dict())

        #then
        self.assertEqual(first.fingerprint, second.fingerprint)
        self.assertEqual(len(first.fingerprint), 64)
