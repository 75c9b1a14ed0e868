from unittest import TestCase

import numpy as np

from opacon import exceptions
from opacon.neural_core import LmConfig, Mlp, lm_train, n_params

from .helpers import central_difference, rel_error


class MlpTest(TestCase):
    @classmethod
    def setUpClass(cls):
        cls.net = Mlp.init_random(3, 4, seed=7)
        cls.x = np.array([0.3, -1.2, 0.8])

    def test_n_params(self):
        self.assertEqual(n_params(3, 4), 4 * 4 + 5)
        self.assertEqual(self.net.p, 21)

    def test_zero_network_outputs_zero(self):
        net = Mlp.zeros(5, 2)

        self.assertEqual(net.forward(np.ones(5)), 0.0)

    def test_output_bias_shifts_output(self):
        weights = np.zeros(n_params(2, 3))
        weights[-1] = 2.5
        net = Mlp(2, 3, weights)

        self.assertEqual(net.forward([4.0, -1.0]), 2.5)

    def test_weight_blocks(self):
        weights = np.arange(n_params(2, 3), dtype=float)
        net = Mlp(2, 3, weights)

        self.assertEqual(net.hidden_weights.shape, (3, 2))
        np.testing.assert_array_equal(net.hidden_bias, [6, 7, 8])
        np.testing.assert_array_equal(net.output_weights, [9, 10, 11])
        self.assertEqual(net.output_bias, 12.0)

    def test_raises_exception_on_wrong_input_length(self):
        with self.assertRaises(exceptions.InputShapeError):
            self.net.forward([1.0, 2.0])

    def test_raises_exception_on_wrong_weight_count(self):
        with self.assertRaises(exceptions.InputShapeError):
            Mlp(3, 4, np.zeros(5))

    def test_raises_exception_on_non_finite_weights(self):
        weights = np.zeros(n_params(2, 2))
        weights[3] = np.nan
        with self.assertRaises(exceptions.NonFiniteWeightsError):
            Mlp(2, 2, weights)

    def test_weights_are_read_only(self):
        with self.assertRaises(ValueError):
            self.net.weights[0] = 1.0

    def test_input_jacobian_matches_finite_differences(self):
        for seed in range(20):
            net = Mlp.init_random(4, 5, seed=seed, scale=1.0)
            x = np.random.default_rng(100 + seed).normal(size=4)

            numeric = central_difference(net.forward, x)

            self.assertLess(rel_error(net.input_jacobian(x), numeric), 1e-5)

    def test_weight_jacobian_matches_finite_differences(self):
        for seed in range(20):
            net = Mlp.init_random(3, 6, seed=seed, scale=1.0)
            x = np.random.default_rng(200 + seed).normal(size=3)

            numeric = central_difference(lambda w: net.with_weights(w).forward(x), net.weights)

            self.assertLess(rel_error(net.weight_jacobian(x), numeric), 1e-5)

    def test_output_bias_entry_of_weight_jacobian_is_one(self):
        self.assertEqual(self.net.weight_jacobian(self.x)[-1], 1.0)

    def test_evaluate_agrees_with_separate_calls(self):
        y, dx, dtheta = self.net.evaluate(self.x)

        self.assertEqual(y, self.net.forward(self.x))
        np.testing.assert_allclose(dx, self.net.input_jacobian(self.x), rtol=1e-14)
        np.testing.assert_allclose(dtheta, self.net.weight_jacobian(self.x), rtol=1e-14)

    def test_document_preserves_network(self):
        restored = Mlp.from_dict(self.net.to_dict())

        np.testing.assert_array_equal(restored.weights, self.net.weights)
        self.assertEqual(restored.forward(self.x), self.net.forward(self.x))

    def test_raises_exception_on_malformed_document(self):
        with self.assertRaises(exceptions.InputShapeError):
            Mlp.from_dict({"n_in": 2})


class LmTrainTest(TestCase):
    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(3)
        cls.A = rng.normal(size=(50, 3))
        cls.b = cls.A @ np.array([1.0, -2.0, 0.5]) + 0.1 * rng.normal(size=50)

    def test_linear_least_squares_reaches_normal_equation_solution(self):
        result = lm_train(lambda t: self.A @ t - self.b, lambda t: self.A, np.zeros(3))
        expected = np.linalg.lstsq(self.A, self.b, rcond=None)[0]

        np.testing.assert_allclose(result.theta, expected, atol=1e-6)
        self.assertTrue(result.converged)

    def test_accepted_sse_never_increases(self):
        result = lm_train(lambda t: self.A @ t - self.b, lambda t: self.A, np.zeros(3))

        self.assertTrue(np.all(np.diff(result.history) <= 0))
        self.assertEqual(result.sse, result.history[-1])

    def test_rosenbrock_converges(self):
        def residual(t):
            return np.array([10.0 * (t[1] - t[0] ** 2), 1.0 - t[0]])

        def jacobian(t):
            return np.array([[-20.0 * t[0], 10.0], [-1.0, 0.0]])

        result = lm_train(residual, jacobian, [-1.2, 1.0])

        np.testing.assert_allclose(result.theta, [1.0, 1.0], atol=1e-6)

    def test_zero_residual_stops_immediately(self):
        result = lm_train(lambda t: np.zeros(4), lambda t: np.zeros((4, 2)), [1.0, 2.0])

        self.assertEqual(result.iterations, 0)
        self.assertTrue(result.converged)

    def test_raises_exception_on_non_finite_start(self):
        with self.assertRaises(exceptions.TrainingInitError):
            lm_train(lambda t: np.array([np.nan]), lambda t: np.zeros((1, 1)), [0.0])

    def test_raises_exception_on_non_finite_jacobian(self):
        with self.assertRaises(exceptions.SingularSystemError):
            lm_train(lambda t: t - 1.0, lambda t: np.full((2, 2), np.inf), np.zeros(2))

    def test_raises_exception_on_jacobian_shape_mismatch(self):
        with self.assertRaises(exceptions.InputShapeError):
            lm_train(lambda t: t - 1.0, lambda t: np.eye(3), np.zeros(2))

    def test_config_validation(self):
        with self.assertRaises(exceptions.ConfigError):
            LmConfig(damping=0.0)
        with self.assertRaises(exceptions.ConfigError):
            LmConfig(decrease=1.5)
        with self.assertRaises(exceptions.ConfigError):
            LmConfig(increase=1.0)
