from unittest import TestCase
from unittest.mock import MagicMock

import numpy as np

from src.model.block import ModelConfig, block_forward
from src.model.tensor import Tensor
from src.model.tokenizer import FeatureSpec
from src.model.tokenmixer import TokenMixerModel
from src.parallel.token_parallel import (
    CommLog, LayoutError, ShardedTensor, ShardingError, all2all, parallel_block_forward, run_parallel
)
from src.services.simulation_service import SimulationService, toy_model


def _tokens(batch: int, tokens: int = 4, dim: int = 8, seed: int = 0) -> Tensor:
    return Tensor(np.random.default_rng(seed).standard_normal((batch, tokens, dim)))


class TestShardedTensor(TestCase):
    def test_shard_should_round_trip_through_unshard(self):
        #given
        x = _tokens(4)

        #when
        under_test = ShardedTensor.shard(x, 1, 2, "token")

        #then
        self.assertEqual(under_test.devices, 2)
        self.assertEqual(under_test.slices[0].shape, (4, 2, 8))
        np.testing.assert_array_equal(under_test.unshard().data, x.data)

    def test_shard_should_raise_for_an_indivisible_axis(self):
        with self.assertRaises(ShardingError):
            ShardedTensor.shard(_tokens(3), 0, 2)


class TestAll2All(TestCase):
    def test_all2all_should_move_the_shard_axis_and_log_one_event(self):
        #given
        x = Tensor(np.arange(96, dtype=np.float64).reshape(4, 6, 4))
        log = CommLog()

        #when
        resharded = all2all(ShardedTensor.shard(x, 0, 2), 1, log)

        #then
        self.assertEqual(resharded.shard_dim, 1)
        np.testing.assert_array_equal(resharded.slices[0].data, x.data[:, :3])
        np.testing.assert_array_equal(resharded.slices[1].data, x.data[:, 3:])
        self.assertEqual(log.all2all_count, 1)
        self.assertEqual(log.all2all_bytes, 96 * 8 // 2)

    def test_all2all_should_raise_for_an_indivisible_target_axis(self):
        with self.assertRaises(ShardingError):
            all2all(ShardedTensor.shard(_tokens(4, tokens=3), 0, 2), 1)


class TestParallelBlockForward(TestCase):
    def test_parallel_block_forward_should_match_the_serial_block(self):
        #given
        model = toy_model(tokens=4, dim=8, heads=4, layers=1)
        x = _tokens(4)
        log = CommLog()

        #when
        output = parallel_block_forward(ShardedTensor.shard(x, 0, 2), model.blocks[0], model.config.mix_config, log)

        #then
        expected = block_forward(x, model.blocks[0], model.config.mix_config)
        self.assertEqual(output.layout, "token")
        np.testing.assert_allclose(output.unshard().data, expected.data, rtol=0, atol=1e-10)
        self.assertEqual(log.all2all_count, 2)

    def test_parallel_block_forward_should_accept_token_sharded_input(self):
        #given
        model = toy_model(tokens=4, dim=8, heads=4, layers=1)
        x = _tokens(4)

        #when
        output = parallel_block_forward(ShardedTensor.shard(x, 1, 2, "token"), model.blocks[0], model.config.mix_config)

        #then
        expected = block_forward(x, model.blocks[0], model.config.mix_config)
        np.testing.assert_allclose(output.unshard().data, expected.data, rtol=0, atol=1e-10)

    def test_parallel_block_forward_should_reject_head_sharded_input(self):
        model = toy_model(tokens=4, dim=8, heads=4, layers=1)
        with self.assertRaises(LayoutError):
            parallel_block_forward(ShardedTensor.shard(_tokens(4), 1, 2, "head"), model.blocks[0], model.config.mix_config)


class TestRunParallel(TestCase):
    def test_run_should_match_the_serial_model_with_two_l_plus_one_exchanges(self):
        under_test = SimulationService()
        for devices in (1, 2, 4):
            for layers in (1, 2, 3):
                with self.subTest(devices=devices, layers=layers):
                    #when
                    report = under_test.run(devices, layers)

                    #then
                    self.assertLess(report.max_abs_diff, 1e-10)
                    self.assertEqual(report.all2all_count, 2 * layers + 1)
                    self.assertTrue(report.passed)

    def test_naive_run_should_match_the_serial_model_with_four_l_exchanges(self):
        under_test = SimulationService()
        for devices in (1, 2, 4):
            for layers in (1, 2, 3):
                with self.subTest(devices=devices, layers=layers):
                    #when
                    report = under_test.run(devices, layers, naive=True)

                    #then
                    self.assertLess(report.max_abs_diff, 1e-10)
                    self.assertEqual(report.all2all_count, 4 * layers)

    def test_run_should_not_count_aux_pooling_all_reduce_as_all2all(self):
        #given
        model = toy_model(tokens=4, dim=8, heads=4, layers=3)

        #when
        result = run_parallel(model, ShardedTensor.shard(_tokens(4), 0, 2), 2)

        #then
        kinds = [event.kind for event in result.log.events]
        self.assertEqual(kinds.count("all_reduce"), 1)
        self.assertEqual(result.log.all2all_count, 7)

    def test_run_should_give_the_same_result_with_threads(self):
        #given
        model = toy_model(tokens=4, dim=8, heads=4, layers=3)
        x = ShardedTensor.shard(_tokens(8), 0, 4)

        #when
        serial = run_parallel(model, x, 4)
        threaded = run_parallel(model, x, 4, threads=True)

        #then
        np.testing.assert_array_equal(serial.logits.data, threaded.logits.data)
        self.assertEqual(serial.log.to_records(), threaded.log.to_records())

    def test_run_should_record_every_exchange_to_the_histogram(self):
        #given
        histogram = MagicMock()

        #when
        SimulationService(histogram=histogram).run(2, 2)

        #then
        self.assertEqual(histogram.record.call_count, 5)

    def test_run_should_raise_when_tokens_do_not_shard(self):
        with self.assertRaises(ShardingError):
            SimulationService().run(3, 1)

    def test_run_should_reject_rankmixer_stacks(self):
        #given
        features = [FeatureSpec(name=f"f{g}", cardinality=8, emb_dim=4, group=g) for g in range(3)]
        config = ModelConfig(dim=8, heads=4, layers=1, block_type="rankmixer", interval_residuals=False)
        model = TokenMixerModel(features, config)

        #when / then
        with self.assertRaises(LayoutError):
            run_parallel(model, ShardedTensor.shard(_tokens(4), 0, 2), 2)

    def test_run_should_reject_strategies_without_a_per_token_plan(self):
        #given
        features = [FeatureSpec(name=f"f{g}", cardinality=8, emb_dim=4, group=g) for g in range(3)]
        model = TokenMixerModel(features, ModelConfig(dim=8, heads=4, layers=1, mix_strategy="half_tokens"))

        #when / then
        with self.assertRaises(LayoutError):
            run_parallel(model, ShardedTensor.shard(_tokens(4), 0, 2), 2)
