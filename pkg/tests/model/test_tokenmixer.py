from unittest import TestCase

import numpy as np

from src.model.block import ModelConfig
from src.model.moe import MoeConfig
from src.model.tensor import Tape, bce_with_logits
from src.model.tokenizer import FeatureSpec
from src.model.tokenmixer import TokenMixerModel, model_forward

FEATURES = [FeatureSpec(name=f"f{i}", cardinality=6, emb_dim=3, group=i) for i in range(3)]


def _ids(batch: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 6, size=(batch, 3))


class TestTokenMixerModel(TestCase):
    def test_forward_should_produce_logits_and_aux_logits_at_junction_targets(self):
        #given
        under_test = TokenMixerModel(FEATURES, ModelConfig(dim=8, heads=4, layers=5, interval=2))

        #when
        output = under_test.forward(_ids(7))

        #then
        self.assertEqual(output.logits.shape, (7,))
        self.assertEqual(sorted(output.aux_logits), [2, 4])
        self.assertEqual(len(output.layers), 6)
        self.assertEqual(under_test.junctions, [(0, 2), (2, 4)])

    def test_forward_tokens_should_be_identity_with_zero_down_matrices(self):
        #given
        config = ModelConfig(dim=8, heads=4, layers=3, interval_residuals=False, init_scales=(1.0, 1.0, 0.0))
        under_test = TokenMixerModel(FEATURES, config)
        x = under_test.tokenizer.forward(_ids(4))

        #when
        output = under_test.forward_tokens(x)

        #then
        np.testing.assert_allclose(output.layers[-1].data, x.data, rtol=0, atol=1e-12)

    def test_model_forward_should_order_aux_logits_by_layer(self):
        #given
        under_test = TokenMixerModel(FEATURES, ModelConfig(dim=8, heads=4, layers=5, interval=2))
        x = under_test.tokenizer.forward(_ids(3))

        #when
        logits, aux = model_forward(x, under_test)

        #then
        self.assertEqual(logits.shape, (3,))
        self.assertEqual(len(aux), 2)

    def test_loss_should_add_weighted_aux_losses(self):
        #given
        under_test = TokenMixerModel(FEATURES, ModelConfig(dim=8, heads=4, layers=3, aux_weight=0.5))
        labels = np.array([0, 1, 1, 0])
        output = under_test.forward(_ids(4))

        #when
        loss = under_test.loss(output, labels)

        #then
        expected = bce_with_logits(output.logits, labels).item() + 0.5 * bce_with_logits(output.aux_logits[2], labels).item()
        self.assertAlmostEqual(loss.item(), expected, places=12)

    def test_detached_aux_heads_should_not_send_gradient_into_the_stack(self):
        #given
        config = ModelConfig(dim=8, heads=4, layers=3, aux_detached=True, aux_weight=1.0)
        under_test = TokenMixerModel(FEATURES, config)
        ids, labels = _ids(4), np.array([0, 1, 1, 0])

        #when
        with Tape() as tape:
            output = under_test.forward(ids)
            aux_only = bce_with_logits(output.aux_logits[2], labels)
            grads = tape.backward(aux_only, leaves=under_test.parameters())

        #then
        np.testing.assert_array_equal(grads[under_test.blocks[0].mixing_net.w_up], 0.0)
        self.assertTrue(np.any(grads[under_test.aux_heads[2].weight] != 0))

    def test_zero_aux_weight_should_match_detached_aux_heads_in_the_stack_gradients(self):
        #given
        ids, labels = _ids(5, seed=2), np.array([0, 1, 1, 0, 1])
        grads = {}
        for name, config in (
                ("zero_weight", ModelConfig(dim=8, heads=4, layers=3, aux_weight=0.0)),
                ("detached", ModelConfig(dim=8, heads=4, layers=3, aux_weight=0.3, aux_detached=True))):
            model = TokenMixerModel(FEATURES, config, seed=4)
            stack = {key: param for key, param in model.named_parameters().items() if not key.startswith("aux")}

            #when
            with Tape() as tape:
                loss = model.loss(model.forward(ids), labels)
                result = tape.backward(loss, leaves=list(stack.values()))
            grads[name] = {key: result[param] for key, param in stack.items()}

        #then
        self.assertEqual(grads["zero_weight"].keys(), grads["detached"].keys())
        for key, grad in grads["zero_weight"].items():
            np.testing.assert_allclose(grads["detached"][key], grad, rtol=0, atol=1e-12, err_msg=key)

    def test_named_parameters_should_split_into_dense_and_embedding_parameters(self):
        #given
        under_test = TokenMixerModel(FEATURES, ModelConfig(dim=8, heads=4, layers=3))

        #when
        named = under_test.named_parameters()
        dense, sparse = under_test.dense_parameters(), under_test.embedding_parameters()

        #then
        self.assertEqual(len(named), len(dense) + len(sparse))
        self.assertEqual(len({id(p) for p in named.values()}), len(named))
        self.assertIn("head.weight", named)
        self.assertIn("aux2.weight", named)

    def test_parameter_count_should_separate_activated_experts(self):
        #given
        dense = TokenMixerModel(FEATURES, ModelConfig(dim=8, heads=4, layers=2))
        sparse = TokenMixerModel(FEATURES, ModelConfig(dim=8, heads=4, layers=2), MoeConfig(enabled=True))

        #when
        dense_total, dense_activated = dense.parameter_count()
        total, activated = sparse.parameter_count()

        #then
        self.assertEqual(dense_total, dense_activated)
        self.assertLess(activated, total)
        self.assertEqual(len(sparse.moe_layers()), 4)

    def test_rankmixer_stack_should_merge_tokens_into_half_as_many_heads(self):
        #given
        config = ModelConfig(dim=8, heads=4, layers=2, block_type="rankmixer", rankmixer_heads="half_tokens",
                             interval_residuals=False)

        #when
        under_test = TokenMixerModel(FEATURES, config)
        output = under_test.forward(_ids(2))

        #then
        self.assertEqual(under_test.layer_shapes, [(4, 8), (2, 16), (2, 16)])
        self.assertEqual(output.logits.shape, (2,))
