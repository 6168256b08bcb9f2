import unittest

import numpy as np

import dense_oracle
import qlayers
import qnn
import simcore
from errors import EncodingError, ValidationError

FD_STEP = 1e-5


def circuit(text, n_qubits):
    return qnn.bind(qnn.CircuitSpec.from_notation(text, n_qubits))


def random_spec(rng, n_qubits):
    angle_loads = ['AngleX', 'AngleY', 'AngleZ']
    blocks = []
    for b in range(int(rng.integers(1, 4))):
        if b == 0:
            loads = angle_loads + ['Amplitude']
        else:
            loads = angle_loads + ['IdentityLoad']
        load = qlayers.LoadOpSpec(loads[int(rng.integers(len(loads)))])
        kinds = ['BEL', 'SEL', 'SimplifiedTwoDesign', 'BellLayer', 'IdentityVar']
        kind = kinds[int(rng.integers(len(kinds)))]
        layers = 0 if kind == 'IdentityVar' else int(rng.integers(1, 3))
        blocks.append((load, qlayers.VarOpSpec(kind, layers)))
    return qnn.CircuitSpec(n_qubits, tuple(blocks))


def finite_difference(f, x):
    """Central differences of a vector-valued f, one column per coordinate of x."""
    cols = []
    for i in range(x.shape[0]):
        plus = x.copy()
        minus = x.copy()
        plus[i] += FD_STEP
        minus[i] -= FD_STEP
        cols.append((f(plus) - f(minus)) / (2 * FD_STEP))
    return np.stack(cols, axis=-1)


class TestBind(unittest.TestCase):
    def test_amplitude_bel(self):
        self.assertEqual(circuit('Amplitude > BEL(1)', 8).total_params, 8)

    def test_manual_pqc(self):
        self.assertEqual(circuit('AngleX > BEL(3)', 6).total_params, 18)

    def test_layout(self):
        binding = circuit('Amplitude > SEL(1) > AngleY > BEL(2)', 3)
        self.assertEqual(binding.param_layout, (0, 9))
        self.assertEqual(binding.total_params, 15)

    def test_too_many_blocks(self):
        with self.assertRaises(ValidationError):
            circuit(' > '.join(['AngleX > BEL(1)'] * 6), 2)

    def test_data_must_enter_the_circuit(self):
        with self.assertRaises(ValidationError):
            circuit('BEL(1) > SEL(1)', 2)

    def test_amplitude_only_in_the_first_block(self):
        with self.assertRaises(ValidationError):
            circuit('AngleX > BEL(1) > Amplitude > BEL(1)', 2)


class TestForward(unittest.TestCase):
    def test_all_zero(self):
        binding = circuit('AngleX > BEL(1)', 2)
        np.testing.assert_allclose(qnn.pqc_forward(binding, np.zeros(2), np.zeros(2)), [1, 1], atol=1e-12)

    def test_amplitude_basis_input(self):
        binding = circuit('Amplitude > BEL(1)', 3)
        x = np.zeros(8)
        x[0] = 1
        np.testing.assert_allclose(qnn.pqc_forward(binding, np.zeros(3), x), [1, 1, 1], atol=1e-12)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        binding = circuit('AngleY > SEL(1)', 2)
        params = rng.uniform(0, 2 * np.pi, size=6)
        x = rng.uniform(-1, 1, size=2)
        gates = [
            simcore.GateOp('RY', (0,), (x[0],)),
            simcore.GateOp('RY', (1,), (x[1],)),
            simcore.GateOp('ROT', (0,), tuple(params[0:3])),
            simcore.GateOp('ROT', (1,), tuple(params[3:6])),
            simcore.GateOp('CNOT', (0, 1)),
            simcore.GateOp('CNOT', (1, 0)),
        ]
        psi = dense_oracle.run(2, gates)
        expected = [dense_oracle.expval_z(2, psi, q) for q in range(2)]
        np.testing.assert_allclose(qnn.pqc_forward(binding, params, x), expected, atol=1e-10)

    def test_every_block_reuploads_the_input(self):
        rng = np.random.default_rng(8)
        binding = circuit('AngleX > BEL(1) > AngleZ > BEL(1)', 3)
        params = rng.uniform(0, 2 * np.pi, size=6)
        x = rng.uniform(-1, 1, size=3)
        gates = []
        for load, offset in (('RX', 0), ('RZ', 3)):
            gates += [simcore.GateOp(load, (q,), (x[q],)) for q in range(3)]
            gates += [simcore.GateOp('RX', (q,), (params[offset + q],)) for q in range(3)]
            gates += [simcore.GateOp('CNOT', (q, (q + 1) % 3)) for q in range(3)]
        psi = dense_oracle.run(3, gates)
        expected = [dense_oracle.expval_z(3, psi, q) for q in range(3)]
        np.testing.assert_allclose(qnn.pqc_forward(binding, params, x), expected, atol=1e-10)

    def test_batch_equals_single_samples(self):
        rng = np.random.default_rng(9)
        binding = circuit('Amplitude > SEL(1) > AngleY > BEL(1)', 3)
        params = qnn.init_params(binding, rng)
        xs = rng.uniform(0.1, 1.0, size=(4, 3))
        batch = qnn.pqc_forward(binding, params, xs)
        for i in range(4):
            np.testing.assert_allclose(batch[i], qnn.pqc_forward(binding, params, xs[i]), atol=1e-12)

    def test_output_bounds_and_determinism(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            spec = random_spec(rng, 3)
            binding = qnn.bind(spec)
            params = qnn.init_params(binding, rng)
            x = rng.uniform(0.2, 2.0, size=min(spec.max_input_features(), 3))
            out = qnn.pqc_forward(binding, params, x)
            self.assertTrue(np.all(out <= 1 + 1e-12) and np.all(out >= -1 - 1e-12))
            np.testing.assert_array_equal(out, qnn.pqc_forward(binding, params, x))

    def test_zero_input_with_amplitude(self):
        binding = circuit('Amplitude > BEL(1)', 2)
        with self.assertRaises(EncodingError):
            qnn.pqc_forward(binding, np.zeros(2), np.zeros(4))

    def test_dimension_mismatches(self):
        binding = circuit('AngleX > BEL(1)', 2)
        with self.assertRaises(ValidationError):
            qnn.pqc_forward(binding, np.zeros(3), np.zeros(2))
        with self.assertRaises(ValidationError):
            qnn.pqc_forward(binding, np.zeros(2), np.zeros(3))
        # Amplitude accepts 4 features, the re-uploading AngleX only 2
        binding = circuit('Amplitude > BEL(1) > AngleX > BEL(1)', 2)
        with self.assertRaises(ValidationError):
            qnn.pqc_forward(binding, np.zeros(4), np.ones(4))


class TestGradients(unittest.TestCase):
    def test_shapes(self):
        binding = circuit('AngleX > SEL(1) > AngleY > BEL(2)', 3)
        rng = np.random.default_rng(1)
        d_params, d_input = qnn.pqc_gradients(binding, qnn.init_params(binding, rng), rng.normal(size=2))
        self.assertEqual(d_params.shape, (3, binding.total_params))
        self.assertEqual(d_input.shape, (3, 2))

    def test_cosine_extremum(self):
        binding = circuit('AngleX > BEL(1)', 1)
        d_params, d_input = qnn.pqc_gradients(binding, np.array([0.0]), np.array([np.pi]))
        self.assertAlmostEqual(d_params[0, 0], 0.0, delta=1e-8)
        self.assertAlmostEqual(d_input[0, 0], 0.0, delta=1e-8)

    def test_single_qubit_closed_form(self):
        # RX(w) RX(x) |0> gives <Z> = cos(x + w)
        binding = circuit('AngleX > BEL(1)', 1)
        x, w = 0.3, 0.4
        d_params, d_input = qnn.pqc_gradients(binding, np.array([w]), np.array([x]))
        self.assertAlmostEqual(d_params[0, 0], -np.sin(x + w), places=12)
        self.assertAlmostEqual(d_input[0, 0], -np.sin(x + w), places=12)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(2023)
        for _ in range(200):
            n = int(rng.integers(1, 5))
            spec = random_spec(rng, n)
            binding = qnn.bind(spec)
            params = qnn.init_params(binding, rng)
            d = int(rng.integers(1, min(spec.max_input_features(), 2 * n) + 1))
            x = rng.uniform(0.5, 1.5, size=d)
            d_params, d_input = qnn.pqc_gradients(binding, params, x)
            if binding.total_params > 0:
                fd_params = finite_difference(lambda p: qnn.pqc_forward(binding, p, x), params)
                np.testing.assert_allclose(d_params, fd_params, rtol=1e-5, atol=1e-7, err_msg=spec.notation)
            fd_input = finite_difference(lambda v: qnn.pqc_forward(binding, params, v), x)
            np.testing.assert_allclose(d_input, fd_input, rtol=1e-5, atol=1e-7, err_msg=spec.notation)

    def test_vjp_is_the_weighted_jacobian(self):
        rng = np.random.default_rng(12)
        binding = circuit('Amplitude > SEL(1) > AngleX > SimplifiedTwoDesign(1)', 3)
        params = qnn.init_params(binding, rng)
        xs = rng.uniform(0.2, 1.0, size=(5, 3))
        upstream = rng.normal(size=(5, 3))
        d_params, d_inputs = qnn.pqc_vjp(binding, params, xs, upstream)
        expected_params = np.zeros(binding.total_params)
        for i in range(5):
            jac_params, jac_input = qnn.pqc_gradients(binding, params, xs[i])
            expected_params += upstream[i] @ jac_params
            np.testing.assert_allclose(d_inputs[i], upstream[i] @ jac_input, atol=1e-12)
        np.testing.assert_allclose(d_params, expected_params, atol=1e-12)

    def test_vjp_upstream_shape(self):
        binding = circuit('AngleX > BEL(1)', 2)
        with self.assertRaises(ValidationError):
            qnn.pqc_vjp(binding, np.zeros(2), np.zeros((3, 2)), np.zeros((3, 3)))


if __name__ == '__main__':
    unittest.main()
