import os
import unittest
from unittest import TestCase

import numpy as np

from src.dao.experiment_config import ExperimentConfig
from src.dao.synthetic_data import generate_splits
from src.model.fp8 import InvalidParametersError
from src.services.quantization_service import QuantizationService, fp8_model_forward, quantize_weights
from src.services.training_service import TrainingService

EXPERIMENT_FILE = "tests/dao/test_experiment.toml"


class TestQuantizationService(TestCase):
    def setUp(self):
        self.config = ExperimentConfig(experiment_file=EXPERIMENT_FILE)
        self.model = TrainingService(self.config).build_model()
        self.eval_data = generate_splits(self.config.synthetic_spec)[1]

    def test_quantize_weights_should_leave_the_original_model_untouched(self):
        #given
        before = {key: param.data.copy() for key, param in self.model.named_parameters().items()}

        #when
        quantized = quantize_weights(self.model)

        #then
        for key, param in self.model.named_parameters().items():
            np.testing.assert_array_equal(param.data, before[key])
        self.assertFalse(np.array_equal(quantized.blocks[0].mixing_net.w_up.data, before["block1.mixing.0"]))
        np.testing.assert_array_equal(quantized.head.weight.data, before["head.weight"])

    def test_quantize_weights_should_keep_routers_in_high_precision(self):
        #given
        model = TrainingService(self.config.with_overrides({"moe.enabled": True})).build_model()
        router = model.moe_layers()[0].router.data.copy()

        #when
        quantized = quantize_weights(model)

        #then
        np.testing.assert_array_equal(quantized.moe_layers()[0].router.data, router)

    def test_fp8_model_forward_should_keep_the_tokenizer_exact(self):
        #given
        ids = self.eval_data.ids[:32]

        #when
        low, report, full = fp8_model_forward(self.model, ids, "channel")

        #then
        self.assertEqual(report["layer_deviations"][0], 0.0)
        self.assertTrue(all(0.0 <= d < 0.25 for d in report["layer_deviations"]))
        self.assertGreater(report["score_max_abs_deviation"], 0.0)
        self.assertEqual(low.shape, full.shape)

    def test_evaluate_should_match_full_precision_when_disabled(self):
        #given
        under_test = QuantizationService(batch_size=50)

        #when
        report = under_test.evaluate(self.model, self.eval_data, enabled=False)

        #then
        self.assertEqual(report.auc_fp8, report.auc_full)
        self.assertEqual(report.score_max_abs_deviation, 0.0)
        self.assertEqual(report.examples, 128)
        self.assertEqual(len(report.layer_deviations), 4)

    def test_evaluate_should_report_the_auc_of_both_paths(self):
        #given
        under_test = QuantizationService(granularity="tensor", batch_size=64)

        #when
        report = under_test.evaluate(self.model, self.eval_data)

        #then
        self.assertLess(abs(report.auc_delta), 0.05)
        self.assertEqual(report.to_dict()["auc_delta"], report.auc_delta)

    def test_evaluate_should_raise_for_non_finite_parameters(self):
        #given
        self.model.head.bias.data[...] = np.nan

        #when / then
        with self.assertRaises(InvalidParametersError):
            QuantizationService().evaluate(self.model, self.eval_data)


@unittest.skipUnless(os.getenv("TOKENMIXER_SLOW_TESTS"), "set TOKENMIXER_SLOW_TESTS=1 to train the desk default")
class TestTrainedFidelity(TestCase):
    def test_fp8_inference_should_keep_the_held_out_auc_of_a_trained_model(self):
        #given
        config = ExperimentConfig(experiment_file="configs/desk_default.toml")
        _, model = TrainingService(config).train()
        eval_data = generate_splits(config.synthetic_spec)[1]

        for granularity in ("tensor", "channel"):
            with self.subTest(granularity=granularity):
                #when
                report = QuantizationService(granularity=granularity).evaluate(model, eval_data)

                #then
                self.assertGreater(report.auc_full, 0.5)
                self.assertGreaterEqual(report.auc_fp8, report.auc_full - 0.002)
