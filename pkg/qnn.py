"""Parameterized quantum circuit classifier built from QML blocks.

A block is a data (re-)uploading operation followed by a variational
operation; every block re-uploads the same input vector. Gradients are exact,
computed by an adjoint sweep over the statevector.
"""
import logging
from collections import namedtuple

import numpy as np

import qlayers
import simcore
from errors import ValidationError

MAX_BLOCKS = 5

# source is 'param', 'input' or None for fixed gates
TapeOp = namedtuple('TapeOp', ['kind', 'wires', 'source', 'index'])


class CircuitSpec:
    def __init__(self, n_qubits, blocks):
        self.n_qubits = n_qubits
        self.blocks = tuple(blocks)

    def validate(self):
        simcore.check_n_qubits(self.n_qubits)
        if not 1 <= len(self.blocks) <= MAX_BLOCKS:
            raise ValidationError('A circuit needs 1 to {} blocks, got {}'.format(MAX_BLOCKS, len(self.blocks)))
        if all(load.is_identity for (load, _) in self.blocks):
            raise ValidationError('At least one block must upload the input data: {}'.format(self.notation))
        for i, (load, _) in enumerate(self.blocks):
            if load.kind == qlayers.AMPLITUDE and i != 0:
                raise ValidationError('Amplitude loading is only allowed in the first block: {}'
                                      .format(self.notation))
        return self

    @property
    def notation(self):
        return qlayers.render_blocks(self.blocks)

    @staticmethod
    def from_notation(text, n_qubits):
        return CircuitSpec(n_qubits, qlayers.parse_blocks(text))

    def uses_amplitude(self):
        return self.blocks[0][0].kind == qlayers.AMPLITUDE

    def max_input_features(self):
        limits = []
        for (load, _) in self.blocks:
            limit = qlayers.LOAD_REGISTRY[load.kind].max_features(self.n_qubits)
            if limit is not None:
                limits.append(limit)
        return min(limits)


class PqcBinding:
    def __init__(self, spec, param_layout, total_params):
        self.spec = spec
        self.param_layout = param_layout
        self.total_params = total_params
        self._tapes = {}

    @property
    def n_qubits(self):
        return self.spec.n_qubits

    def tape(self, n_features):
        if n_features not in self._tapes:
            self._tapes[n_features] = self._build_tape(n_features)
        return self._tapes[n_features]

    def _build_tape(self, n_features):
        n = self.spec.n_qubits
        ops = []
        for b, (load, var) in enumerate(self.spec.blocks):
            for g in qlayers.load_gates(load, n, n_features):
                ops.append(TapeOp(g.kind, g.wires, 'input', g.slots[0]))
            offset = self.param_layout[b]
            for g in qlayers.var_gates(var, n):
                if g.kind == 'ROT':
                    # RZ(phi) RY(theta) RZ(omega), applied in that order
                    for kind, slot in zip(('RZ', 'RY', 'RZ'), g.slots):
                        ops.append(TapeOp(kind, g.wires, 'param', offset + slot))
                elif g.slots:
                    ops.append(TapeOp(g.kind, g.wires, 'param', offset + g.slots[0]))
                else:
                    ops.append(TapeOp(g.kind, g.wires, None, None))
        return tuple(ops)


def bind(spec):
    spec.validate()
    layout = []
    total = 0
    for (_, var) in spec.blocks:
        layout.append(total)
        total += qlayers.var_param_count(var, spec.n_qubits)
    logging.debug('Bound the circuit {} with {} parameters'.format(spec.notation, total))
    return PqcBinding(spec, tuple(layout), total)


def init_params(binding, rng):
    return rng.uniform(0.0, 2 * np.pi, size=binding.total_params)


def _check_inputs(binding, params, inputs):
    params = np.asarray(params, dtype=np.float64)
    inputs = np.asarray(inputs, dtype=np.float64)
    if params.shape != (binding.total_params,):
        raise ValidationError('The circuit {} takes {} parameters, got shape {}'
                              .format(binding.spec.notation, binding.total_params, params.shape))
    if inputs.ndim not in (1, 2) or inputs.shape[-1] == 0:
        raise ValidationError('Expected a non-empty input vector or matrix, got shape {}'.format(inputs.shape))
    limit = binding.spec.max_input_features()
    if inputs.shape[-1] > limit:
        raise ValidationError('The circuit {} on {} qubit(s) accepts at most {} input features, got {}'
                              .format(binding.spec.notation, binding.n_qubits, limit, inputs.shape[-1]))
    return params, inputs


def _gate(op, params, inputs):
    if op.source == 'param':
        return simcore.GateOp(op.kind, op.wires, (params[op.index],))
    if op.source == 'input':
        return simcore.GateOp(op.kind, op.wires, (inputs[:, op.index],))
    return simcore.GateOp(op.kind, op.wires)


def _run(binding, params, inputs):
    if binding.spec.uses_amplitude():
        state = simcore.amplitude_encode(inputs, binding.n_qubits)
    else:
        state = simcore.new_state(binding.n_qubits, batch_size=inputs.shape[0])
    for op in binding.tape(inputs.shape[1]):
        simcore.apply_gate(state, _gate(op, params, inputs))
    return state


def pqc_forward(binding, params, inputs):
    params, inputs = _check_inputs(binding, params, inputs)
    single = inputs.ndim == 1
    batch = inputs[None, :] if single else inputs
    res = simcore.expval_z_all(_run(binding, params, batch))
    return res[0] if single else res


def _adjoint(binding, params, inputs, upstream):
    """One adjoint sweep for the observable sum_q upstream[:, q] Z_q.

    Returns per-sample parameter gradients (B x P) and input gradients (B x d).
    """
    state = _run(binding, params, inputs)
    diag = upstream @ simcore.z_signs(binding.n_qubits)
    lam = simcore.State(binding.n_qubits, diag * state.amplitudes)
    d_params = np.zeros((inputs.shape[0], binding.total_params))
    d_inputs = np.zeros(inputs.shape)
    for op in reversed(binding.tape(inputs.shape[1])):
        gate = _gate(op, params, inputs)
        if op.source is not None:
            # d<O>/d(theta) = Im <lam| P |psi> with psi, lam taken just after the gate
            p_psi = simcore.apply_generator(state.copy(), gate)
            grad = np.imag(np.sum(np.conj(lam.amplitudes) * p_psi.amplitudes, axis=1))
            if op.source == 'param':
                d_params[:, op.index] += grad
            else:
                d_inputs[:, op.index] += grad
        undo = simcore.inverse(gate)
        simcore.apply_gate(state, undo)
        simcore.apply_gate(lam, undo)
    if binding.spec.uses_amplitude():
        # back through a = x / |x| on the padded coordinates
        d = inputs.shape[1]
        g = 2 * np.real(lam.amplitudes[:, :d])
        a = inputs / np.linalg.norm(inputs, axis=1, keepdims=True)
        r = np.linalg.norm(inputs, axis=1, keepdims=True)
        d_inputs += (g - a * np.sum(a * g, axis=1, keepdims=True)) / r
    return d_params, d_inputs


def pqc_vjp(binding, params, inputs, upstream):
    # returns (summed d_params, per-sample d_inputs)
    params, inputs = _check_inputs(binding, params, inputs)
    inputs = np.atleast_2d(inputs)
    upstream = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    if upstream.shape != (inputs.shape[0], binding.n_qubits):
        raise ValidationError('Upstream gradient shape {} does not match ({}, {})'
                              .format(upstream.shape, inputs.shape[0], binding.n_qubits))
    d_params, d_inputs = _adjoint(binding, params, inputs, upstream)
    return d_params.sum(axis=0), d_inputs


def pqc_gradients(binding, params, inputs):
    """Jacobians of every <Z_q> w.r.t. the parameters (n x P) and the input (n x d)."""
    params, inputs = _check_inputs(binding, params, inputs)
    if inputs.ndim != 1:
        raise ValidationError('pqc_gradients takes a single input vector')
    n = binding.n_qubits
    # one sweep per measured qubit, run as a batch of identical inputs
    return _adjoint(binding, params, np.tile(inputs, (n, 1)), np.eye(n))
