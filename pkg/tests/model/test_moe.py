from unittest import TestCase

import numpy as np

from src.model.feedforward import PerTokenSwiGLU
from src.model.moe import (
    SPARSITY_PRESETS, ExpertSplitError, MoeConfig, MoeException, RoutingError, SpMoe, default_alpha,
    load_balance, route, select_gates, split_dense
)
from src.model.tensor import Tape, Tensor, reduce_sum


def _dense(positions: int, width: int, seed: int) -> PerTokenSwiGLU:
    return PerTokenSwiGLU(positions, width, 2, np.random.default_rng(seed), init_scales=(1.0, 1.0, 1.0))


class TestGates(TestCase):
    def test_default_alpha_should_be_total_over_active(self):
        #then
        self.assertEqual(default_alpha(*SPARSITY_PRESETS["1:2"]), 2.0)
        self.assertEqual(default_alpha(*SPARSITY_PRESETS["1:4"]), 4.0)
        self.assertEqual(MoeConfig(experts=16, active=2).resolved_alpha, 8.0)

    def test_select_gates_should_sum_to_one(self):
        #given
        scores = Tensor(np.random.default_rng(0).standard_normal((50, 6)))

        #when
        indices, gates = select_gates(scores, 3)

        #then
        self.assertEqual(indices.shape, (50, 3))
        np.testing.assert_allclose(gates.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_route_should_keep_the_selected_experts_when_router_logits_are_scaled(self):
        #given
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((40, 5)))
        router = rng.standard_normal((5, 6))
        indices, _ = route(x, Tensor(router), 3)

        for c in (0.5, 3.0):
            with self.subTest(scale=c):
                #when
                scaled_indices, gates = route(x, Tensor(c * router), 3)

                #then
                np.testing.assert_array_equal(scaled_indices, indices)
                np.testing.assert_allclose(gates.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_route_should_reject_k_above_the_expert_count(self):
        #given
        x = Tensor(np.ones((2, 3)))
        router = Tensor(np.ones((3, 2)))

        #when
        with self.assertRaises(RoutingError):
            route(x, router, 3)

    def test_validate_should_reject_more_active_than_total_experts(self):
        #when
        with self.assertRaises(RoutingError):
            MoeConfig(enabled=True, experts=4, active=5).validate()

    def test_validate_should_reject_unknown_scope(self):
        #when
        with self.assertRaises(MoeException):
            MoeConfig(enabled=True, expert_scope="layer").validate()


class TestSpMoe(TestCase):
    def test_forward_should_give_unselected_experts_zero_gradient(self):
        #given
        under_test = SpMoe(1, 4, 2, MoeConfig(enabled=True, experts=4, active=2), np.random.default_rng(0))
        x = Tensor(np.random.default_rng(1).standard_normal((1, 1, 4)))

        #when
        log = under_test.start_routing_log()
        with Tape() as tape:
            loss = reduce_sum(under_test.forward(x))
            grads = tape.backward(loss, leaves=under_test.parameters())

        #then
        selected = int(np.argmax(log.counts[0]))
        for expert in range(3):
            grad = grads[under_test.routed.w_up][0, expert]
            if expert == selected:
                self.assertTrue(np.any(grad != 0))
            else:
                np.testing.assert_array_equal(grad, 0.0)

    def test_forward_should_match_between_dispatch_modes(self):
        #given
        grouped = SpMoe(3, 4, 2, MoeConfig(enabled=True, experts=4, active=3), np.random.default_rng(2))
        per_token = SpMoe(3, 4, 2, MoeConfig(enabled=True, experts=4, active=3, dispatch="per_token"),
                          np.random.default_rng(2))
        x = Tensor(np.random.default_rng(3).standard_normal((5, 3, 4)))

        #when
        a, b = grouped.forward(x), per_token.forward(x)

        #then
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)

    def test_global_scope_should_keep_parameter_counts(self):
        #given
        pertoken = SpMoe(4, 8, 2, MoeConfig(enabled=True, experts=4, active=2), np.random.default_rng(0))
        shared_bank = SpMoe(4, 8, 2, MoeConfig(enabled=True, experts=4, active=2, expert_scope="global"),
                            np.random.default_rng(0))

        #when
        counts = pertoken.expert_parameter_count(), shared_bank.expert_parameter_count()

        #then
        self.assertEqual(counts[0], counts[1])
        self.assertEqual(shared_bank.bank_experts, 12)
        self.assertEqual(shared_bank.forward(Tensor(np.ones((2, 4, 8)))).shape, (2, 4, 8))

    def test_parameter_count_should_halve_activated_weights_at_1_2_sparsity(self):
        #given
        under_test = SpMoe(2, 8, 2, MoeConfig(enabled=True, experts=4, active=2), np.random.default_rng(0))

        #when
        total, activated = under_test.expert_parameter_count()

        #then
        self.assertEqual(total, 2 * 3 * 8 * 16)
        self.assertEqual(activated * 2, total)

    def test_init_should_reject_uneven_expert_split(self):
        #when
        with self.assertRaises(ExpertSplitError):
            SpMoe(2, 3, 2, MoeConfig(enabled=True, experts=4, active=2), np.random.default_rng(0))

    def test_load_balance_should_be_near_uniform_at_init(self):
        #given
        under_test = SpMoe(2, 256, 2, MoeConfig(enabled=True, experts=4, active=2), np.random.default_rng(4))
        x = Tensor(np.random.default_rng(5).standard_normal((4096, 2, 256)))
        log = under_test.start_routing_log()

        #when
        under_test.forward(x)
        stats = load_balance(log)

        #then
        self.assertEqual(stats.window, 4096)
        self.assertAlmostEqual(stats.uniform_frequency, 1 / 3)
        self.assertEqual(stats.shared_frequency, 1.0)
        self.assertLess(stats.max_relative_deviation, 0.2)
        np.testing.assert_allclose(stats.frequencies.sum(axis=1), 1.0)

    def test_load_balance_should_reject_an_empty_window(self):
        #given
        under_test = SpMoe(2, 4, 2, MoeConfig(enabled=True, experts=4, active=2), np.random.default_rng(0))

        #when
        with self.assertRaises(MoeException):
            load_balance(under_test.start_routing_log())


class TestSplitDense(TestCase):
    def test_split_dense_should_reproduce_the_dense_net_with_all_experts(self):
        #given
        rng = np.random.default_rng(6)

        for instance in range(100):
            positions, width = int(rng.integers(1, 4)), int(rng.integers(1, 5)) * 2
            experts = [2, 4][instance % 2]
            dense = _dense(positions, width, instance)
            x = Tensor(rng.standard_normal((3, positions, width)))

            #when
            sparse = split_dense(dense, experts, active=2, shared=bool(instance % 3))

            #then
            np.testing.assert_allclose(sparse.expert_sum(x).data, dense.forward(x).data, rtol=0, atol=1e-12)

    def test_split_dense_should_route_uniformly_to_the_lowest_experts(self):
        #given
        dense = _dense(2, 4, 7)
        x = Tensor(np.random.default_rng(8).standard_normal((5, 2, 4)))

        #when
        sparse = split_dense(dense, experts=4, active=2)
        only_first = split_dense(dense, experts=4, active=2)
        only_first.routed.w_down.data[:, 1:] = 0.0
        only_first.shared.w_down.data[...] = 0.0

        #then
        np.testing.assert_array_equal(sparse.router.data, 0.0)
        self.assertEqual(sparse.alpha, 2.0)
        np.testing.assert_allclose(only_first.forward(x).data, 2.0 * only_first.expert_sum(x).data, atol=1e-12)

    def test_split_dense_should_reject_uneven_hidden_width(self):
        #when
        with self.assertRaises(ExpertSplitError):
            split_dense(_dense(1, 3, 0), experts=4, active=2)
