"""Dense statevector simulator.

Qubit 0 is the most significant bit of the amplitude index. A state may carry a
leading batch axis, in which case rotation angles may be given per sample.
"""
import numpy as np

from errors import ConfigurationError, EncodingError, ValidationError

MAX_QUBITS = 20

# kind -> (number of wires, number of angles)
GATE_ARITY = {
    'RX': (1, 1),
    'RY': (1, 1),
    'RZ': (1, 1),
    'ROT': (1, 3),
    'CNOT': (2, 0),
    'CZ': (2, 0),
    'H': (1, 0),
}

ROTATION_KINDS = ('RX', 'RY', 'RZ')

_PAULI = {
    'RX': np.array([[0, 1], [1, 0]], dtype=np.complex128),
    'RY': np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    'RZ': np.array([[1, 0], [0, -1]], dtype=np.complex128),
}

_HADAMARD = np.array([[1, 1], [1, -1]], dtype=np.complex128) / np.sqrt(2)


class GateOp:
    def __init__(self, kind, wires, angles=()):
        if kind not in GATE_ARITY:
            raise ValidationError('Unknown gate kind: {}'.format(kind))
        n_wires, n_angles = GATE_ARITY[kind]
        wires = tuple(int(w) for w in wires)
        angles = tuple(angles)
        if len(wires) != n_wires:
            raise ValidationError('{} acts on {} wire(s), got {}'.format(kind, n_wires, len(wires)))
        if len(set(wires)) != len(wires):
            raise ValidationError('{} wires must be distinct: {}'.format(kind, wires))
        if len(angles) != n_angles:
            raise ValidationError('{} takes {} angle(s), got {}'.format(kind, n_angles, len(angles)))
        self.kind = kind
        self.wires = wires
        self.angles = angles

    def __repr__(self):
        return 'GateOp({}, {}, {})'.format(self.kind, self.wires, self.angles)


class State:
    def __init__(self, n_qubits, amplitudes):
        self.n_qubits = n_qubits
        self.amplitudes = amplitudes
        # gates applied since allocation / encoding
        self.n_applied = 0

    @property
    def batch_size(self):
        if self.amplitudes.ndim == 1:
            return None
        return self.amplitudes.shape[0]

    def copy(self):
        res = State(self.n_qubits, self.amplitudes.copy())
        res.n_applied = self.n_applied
        return res

    def norm(self):
        return np.sqrt(np.sum(np.abs(self.amplitudes) ** 2, axis=-1))

    def probabilities(self):
        return np.abs(self.amplitudes) ** 2


def check_n_qubits(n_qubits):
    if not isinstance(n_qubits, (int, np.integer)) or not 1 <= n_qubits <= MAX_QUBITS:
        raise ConfigurationError('The number of qubits must be in [1, {}], got {}'.format(MAX_QUBITS, n_qubits))


def new_state(n_qubits, batch_size=None):
    check_n_qubits(n_qubits)
    dim = 1 << n_qubits
    if batch_size is None:
        amplitudes = np.zeros(dim, dtype=np.complex128)
        amplitudes[0] = 1
    else:
        amplitudes = np.zeros((batch_size, dim), dtype=np.complex128)
        amplitudes[:, 0] = 1
    return State(n_qubits, amplitudes)


def _stack_2x2(a, b, c, d):
    m = np.array([[a, b], [c, d]], dtype=np.complex128)
    # (2, 2, B) -> (B, 2, 2) for per-sample angles
    return np.moveaxis(m, (0, 1), (-2, -1))


def rotation_matrix(kind, theta):
    theta = np.asarray(theta, dtype=np.float64)
    c = np.cos(theta / 2)
    s = np.sin(theta / 2)
    if kind == 'RX':
        return _stack_2x2(c, -1j * s, -1j * s, c)
    if kind == 'RY':
        return _stack_2x2(c, -s, s, c)
    if kind == 'RZ':
        phase = np.exp(-0.5j * theta)
        return _stack_2x2(phase, np.zeros_like(phase), np.zeros_like(phase), np.conj(phase))
    raise ValidationError('{} is not a single-angle rotation'.format(kind))


def gate_matrix(gate):
    """The 2x2 matrix (or stack of matrices) of a single-qubit gate."""
    if gate.kind in ROTATION_KINDS:
        return rotation_matrix(gate.kind, gate.angles[0])
    if gate.kind == 'ROT':
        phi, theta, omega = gate.angles
        return rotation_matrix('RZ', omega) @ rotation_matrix('RY', theta) @ rotation_matrix('RZ', phi)
    if gate.kind == 'H':
        return _HADAMARD
    raise ValidationError('{} is not a single-qubit gate'.format(gate.kind))


def _tensor(state):
    return state.amplitudes.reshape((-1,) + (2,) * state.n_qubits)


def _apply_single(psi, matrix, wire):
    axis = wire + 1
    psi = np.moveaxis(psi, axis, -1)
    if matrix.ndim == 2:
        psi = psi @ matrix.T
    else:
        if matrix.shape[0] != psi.shape[0]:
            raise ValidationError('Got {} per-sample angles for a batch of {}'.format(matrix.shape[0], psi.shape[0]))
        psi = np.einsum('bij,b...j->b...i', matrix, psi)
    return np.moveaxis(psi, -1, axis)


def _apply_cnot(psi, control, target):
    out = psi.copy()
    idx = [slice(None)] * psi.ndim
    idx[control + 1] = 1
    idx = tuple(idx)
    # the control axis is dropped by the integer index
    target_axis = target + 1 if target < control else target
    out[idx] = np.flip(psi[idx], axis=target_axis)
    return out


def _apply_cz(psi, a, b):
    out = psi.copy()
    idx = [slice(None)] * psi.ndim
    idx[a + 1] = 1
    idx[b + 1] = 1
    out[tuple(idx)] *= -1
    return out


def apply_gate(state, gate):
    for w in gate.wires:
        if not 0 <= w < state.n_qubits:
            raise ConfigurationError('Wire {} is out of range for {} qubit(s)'.format(w, state.n_qubits))
    shape = state.amplitudes.shape
    psi = _tensor(state)
    if gate.kind == 'CNOT':
        psi = _apply_cnot(psi, gate.wires[0], gate.wires[1])
    elif gate.kind == 'CZ':
        psi = _apply_cz(psi, gate.wires[0], gate.wires[1])
    else:
        psi = _apply_single(psi, gate_matrix(gate), gate.wires[0])
    state.amplitudes = np.ascontiguousarray(psi).reshape(shape)
    state.n_applied += 1
    return state


def apply_generator(state, gate):
    """Apply the Pauli generator P of a rotation gate exp(-i theta P / 2)."""
    if gate.kind not in ROTATION_KINDS:
        raise ValidationError('{} has no single Pauli generator'.format(gate.kind))
    shape = state.amplitudes.shape
    psi = _apply_single(_tensor(state), _PAULI[gate.kind], gate.wires[0])
    state.amplitudes = np.ascontiguousarray(psi).reshape(shape)
    return state


def inverse(gate):
    if gate.kind in ROTATION_KINDS:
        return GateOp(gate.kind, gate.wires, (-np.asarray(gate.angles[0]),))
    if gate.kind == 'ROT':
        raise ValidationError('Decompose ROT before inverting it')
    return gate


def decompose(gate):
    """Rewrite a gate into RX/RY/RZ/CNOT/CZ/H primitives."""
    if gate.kind == 'ROT':
        phi, theta, omega = gate.angles
        w = gate.wires
        return [GateOp('RZ', w, (phi,)), GateOp('RY', w, (theta,)), GateOp('RZ', w, (omega,))]
    return [gate]


def amplitude_encode(features, n_qubits):
    check_n_qubits(n_qubits)
    features = np.asarray(features, dtype=np.float64)
    dim = 1 << n_qubits
    if features.ndim not in (1, 2):
        raise ConfigurationError('Amplitude encoding takes a feature vector or a batch of them, got shape {}'
                                 .format(features.shape))
    if features.shape[-1] < 1:
        raise ConfigurationError('Amplitude encoding needs at least one feature')
    if features.shape[-1] > dim:
        raise ConfigurationError('{} features do not fit into {} amplitudes'.format(features.shape[-1], dim))
    norm = np.linalg.norm(features, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise EncodingError('Cannot amplitude-encode an all-zero feature vector')
    padded = np.zeros(features.shape[:-1] + (dim,), dtype=np.complex128)
    padded[..., :features.shape[-1]] = features / norm
    return State(n_qubits, padded)


def z_signs(n_qubits):
    """Matrix S with S[q, i] = +1 when bit q of i is 0, else -1."""
    idx = np.arange(1 << n_qubits)
    bits = (idx[None, :] >> (n_qubits - 1 - np.arange(n_qubits))[:, None]) & 1
    return 1.0 - 2.0 * bits


def expval_z(state, qubit):
    if not 0 <= qubit < state.n_qubits:
        raise ConfigurationError('Qubit {} is out of range for {} qubit(s)'.format(qubit, state.n_qubits))
    return state.probabilities() @ z_signs(state.n_qubits)[qubit]


def expval_z_all(state):
    return state.probabilities() @ z_signs(state.n_qubits).T
