import unittest

import numpy as np

import neural
from errors import ConfigurationError, ValidationError


def numeric_gradient(f, x, step=1e-6):
    res = np.zeros_like(x)
    for i in range(x.shape[0]):
        plus = x.copy()
        minus = x.copy()
        plus[i] += step
        minus[i] -= step
        res[i] = (f(plus) - f(minus)) / (2 * step)
    return res


class TestDenseNet(unittest.TestCase):
    def test_param_count(self):
        net = neural.DenseNet.initialize([14, 90, 196], np.random.default_rng(42))
        self.assertEqual(net.param_count, 19186)
        self.assertEqual(net.get_flat().shape, (19186,))

    def test_table_mlp_counts(self):
        extractor = neural.DenseNet.zeros([14, 90, 196])
        classifier = neural.DenseNet.zeros([392, 95, 3])
        self.assertEqual(2 * extractor.param_count, 38372)
        self.assertEqual(classifier.param_count, 37623)
        self.assertEqual(2 * extractor.param_count + classifier.param_count, 75995)

    def test_initialization_bounds(self):
        net = neural.DenseNet.initialize([16, 4, 2], np.random.default_rng(0))
        self.assertLessEqual(np.abs(net.weights[0]).max(), 1 / np.sqrt(16))
        self.assertLessEqual(np.abs(net.biases[1]).max(), 1 / np.sqrt(4))

    def test_shapes_are_checked(self):
        with self.assertRaises(ValidationError):
            neural.DenseNet([2, 3], [np.zeros((3, 2))], [np.zeros(3)])
        with self.assertRaises(ValidationError):
            neural.DenseNet([2], [], [])

    def test_layer_count_is_checked(self):
        with self.assertRaises(ConfigurationError):
            neural.DenseNet([2, 3, 1], [np.zeros((2, 3))], [np.zeros(3)])
        with self.assertRaises(ConfigurationError):
            neural.DenseNet([2, 3], [np.zeros((2, 3))], [])

    def test_flat_round_trip(self):
        net = neural.DenseNet.initialize([3, 4, 2], np.random.default_rng(1))
        other = neural.DenseNet.zeros([3, 4, 2])
        other.set_flat(net.get_flat())
        for a, b in zip(net.weights + net.biases, other.weights + other.biases):
            np.testing.assert_array_equal(a, b)
        with self.assertRaises(ValidationError):
            other.set_flat(np.zeros(5))

    def test_serialize(self):
        net = neural.DenseNet.initialize([3, 4, 2], np.random.default_rng(2))
        copy = neural.DenseNet.deserialize(net.serialize())
        self.assertEqual(copy.layer_sizes, [3, 4, 2])
        np.testing.assert_array_equal(copy.get_flat(), net.get_flat())


class TestDenseForward(unittest.TestCase):
    def test_zero_net(self):
        out, _ = neural.dense_forward(neural.DenseNet.zeros([3, 5, 2]), np.array([1.0, -2.0, 3.0]))
        np.testing.assert_array_equal(out, [0, 0])

    def test_identity_last_layer(self):
        net = neural.DenseNet([2, 2], [np.eye(2)], [np.zeros(2)])
        out, _ = neural.dense_forward(net, np.array([-1.0, 3.0]))
        np.testing.assert_array_equal(out, [-1, 3])

    def test_hidden_relu(self):
        net = neural.DenseNet([1, 2, 1], [np.array([[1.0, -1.0]]), np.array([[1.0], [1.0]])],
                              [np.zeros(2), np.zeros(1)])
        out, _ = neural.dense_forward(net, np.array([2.0]))
        np.testing.assert_array_equal(out, [2.0])

    def test_dimension_mismatch(self):
        with self.assertRaises(ValidationError):
            neural.dense_forward(neural.DenseNet.zeros([3, 2]), np.zeros(4))

    def test_batch(self):
        net = neural.DenseNet.initialize([3, 4, 2], np.random.default_rng(3))
        xs = np.random.default_rng(4).normal(size=(5, 3))
        batch, _ = neural.dense_forward(net, xs)
        for i in range(5):
            np.testing.assert_allclose(batch[i], neural.dense_forward(net, xs[i])[0], atol=1e-14)


class TestDenseBackward(unittest.TestCase):
    def test_zero_upstream(self):
        net = neural.DenseNet.initialize([4, 3, 2], np.random.default_rng(5))
        _, cache = neural.dense_forward(net, np.ones(4))
        grads, d_input = neural.dense_backward(net, cache, np.zeros(2))
        np.testing.assert_array_equal(grads, np.zeros(net.param_count))
        np.testing.assert_array_equal(d_input, np.zeros(4))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        checked = 0
        while checked < 20:
            net = neural.DenseNet.initialize([4, 3, 2], rng)
            x = rng.normal(size=4)
            _, cache = neural.dense_forward(net, x)
            # stay away from the ReLU kink
            if np.min(np.abs(cache[1][0])) <= 1e-3:
                continue
            upstream = rng.normal(size=2)
            grads, d_input = neural.dense_backward(net, cache, upstream)
            flat = net.get_flat()

            def loss_of_params(p):
                trial = net.copy()
                trial.set_flat(p)
                return upstream @ neural.dense_forward(trial, x)[0]

            def loss_of_input(v):
                return upstream @ neural.dense_forward(net, v)[0]

            np.testing.assert_allclose(grads, numeric_gradient(loss_of_params, flat), rtol=1e-6, atol=1e-9)
            np.testing.assert_allclose(d_input, numeric_gradient(loss_of_input, x), rtol=1e-6, atol=1e-9)
            checked += 1

    def test_batch_gradients_are_summed(self):
        net = neural.DenseNet.initialize([3, 5, 2], np.random.default_rng(7))
        xs = np.random.default_rng(8).normal(size=(4, 3))
        ups = np.random.default_rng(9).normal(size=(4, 2))
        _, cache = neural.dense_forward(net, xs)
        grads, d_inputs = neural.dense_backward(net, cache, ups)
        expected = np.zeros(net.param_count)
        for i in range(4):
            _, c = neural.dense_forward(net, xs[i])
            g, d = neural.dense_backward(net, c, ups[i])
            expected += g
            np.testing.assert_allclose(d_inputs[i], d, atol=1e-13)
        np.testing.assert_allclose(grads, expected, atol=1e-12)


class TestSoftmaxCrossEntropy(unittest.TestCase):
    def test_uniform_logits(self):
        loss, d_logits = neural.softmax_cross_entropy(np.zeros(3), np.array([1, 0, 0]))
        self.assertAlmostEqual(loss, np.log(3), places=12)
        np.testing.assert_allclose(d_logits, [1 / 3 - 1, 1 / 3, 1 / 3], atol=1e-15)

    def test_saturation_does_not_overflow(self):
        loss, d_logits = neural.softmax_cross_entropy(np.array([1000.0, 0.0, 0.0]), np.array([1, 0, 0]))
        self.assertTrue(np.isfinite(loss))
        self.assertAlmostEqual(loss, 0.0, places=12)
        self.assertTrue(np.all(np.isfinite(d_logits)))

    def test_gradient_sums_to_zero(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            logits = rng.normal(scale=5, size=4)
            loss, d_logits = neural.softmax_cross_entropy(logits, np.eye(4)[int(rng.integers(4))])
            self.assertGreaterEqual(loss, 0)
            self.assertAlmostEqual(d_logits.sum(), 0.0, places=12)

    def test_malformed_target(self):
        with self.assertRaises(ValidationError):
            neural.softmax_cross_entropy(np.zeros(3), np.array([1, 1, 0]))
        with self.assertRaises(ValidationError):
            neural.softmax_cross_entropy(np.zeros(3), np.array([0.5, 0.5, 0]))
        with self.assertRaises(ValidationError):
            neural.softmax_cross_entropy(np.zeros(3), np.array([1, 0]))


class TestAdam(unittest.TestCase):
    def test_zero_gradient(self):
        state = neural.AdamState(3, 0.1)
        state.m = np.array([0.5, -0.5, 1.0])
        state.v = np.array([0.25, 0.25, 1.0])
        params, state = neural.adam_step(state, np.array([1.0, 2.0, 3.0]), np.zeros(3))
        self.assertEqual(state.step, 1)
        np.testing.assert_allclose(state.m, [0.45, -0.45, 0.9])
        np.testing.assert_allclose(state.v, np.array([0.25, 0.25, 1.0]) * 0.999)
        # the decayed moments alone still move the parameters; a fresh state does not
        fresh = neural.AdamState(3, 0.1)
        unchanged, _ = neural.adam_step(fresh, np.array([1.0, 2.0, 3.0]), np.zeros(3))
        np.testing.assert_array_equal(unchanged, [1.0, 2.0, 3.0])

    def test_first_step_follows_the_sign(self):
        state = neural.AdamState(3, 0.01)
        params, state = neural.adam_step(state, np.zeros(3), np.array([0.5, -2.0, 1e-3]))
        np.testing.assert_allclose(params, [-0.01, 0.01, -0.01], rtol=1e-4)

    def test_converges_on_a_parabola(self):
        state = neural.AdamState(1, 0.1)
        p = np.zeros(1)
        for _ in range(500):
            p, state = neural.adam_step(state, p, 2 * (p - 3))
        self.assertLess(abs(p[0] - 3), 1e-2)

    def test_length_mismatch(self):
        with self.assertRaises(ValidationError):
            neural.adam_step(neural.AdamState(3, 0.1), np.zeros(2), np.zeros(2))

    def test_negative_learning_rate(self):
        with self.assertRaises(ValidationError):
            neural.AdamState(3, -0.1)


if __name__ == '__main__':
    unittest.main()
