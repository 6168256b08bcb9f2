"""Load operations (embeddings) and variational templates.

Every template expands into a list of SlotGate entries: a gate kind, its wires
and, for each angle, the index of the feature or parameter that supplies it.
Templates live in name-keyed registries so new ones can be added with
register_load_op / register_var_op.
"""
import re
from collections import namedtuple

import numpy as np

import simcore
from errors import ValidationError

SlotGate = namedtuple('SlotGate', ['kind', 'wires', 'slots'])

LoadOpEntry = namedtuple('LoadOpEntry', ['gates', 'max_features', 'is_identity'])
VarOpEntry = namedtuple('VarOpEntry', ['gates', 'param_count', 'is_identity'])

LOAD_REGISTRY = {}
VAR_REGISTRY = {}

AMPLITUDE = 'Amplitude'
IDENTITY_LOAD = 'IdentityLoad'
IDENTITY_VAR = 'IdentityVar'


def register_load_op(name, gates, max_features, is_identity=False):
    LOAD_REGISTRY[name] = LoadOpEntry(gates, max_features, is_identity)


def register_var_op(name, gates, param_count, is_identity=False):
    VAR_REGISTRY[name] = VarOpEntry(gates, param_count, is_identity)


class LoadOpSpec:
    def __init__(self, kind):
        self.kind = kind
        if self.kind not in LOAD_REGISTRY:
            raise ValidationError('Unknown load operation: {}'.format(self.kind))

    @property
    def is_identity(self):
        return LOAD_REGISTRY[self.kind].is_identity

    def render(self):
        return self.kind


class VarOpSpec:
    def __init__(self, kind, layers=1):
        self.kind = kind
        self.layers = int(layers)
        if self.kind not in VAR_REGISTRY:
            raise ValidationError('Unknown variational operation: {}'.format(self.kind))
        if self.is_identity:
            if self.layers < 0:
                raise ValidationError('{} layers must be non-negative'.format(self.kind))
        elif self.layers < 1:
            raise ValidationError('{} needs at least one layer, got {}'.format(self.kind, self.layers))

    @property
    def is_identity(self):
        return VAR_REGISTRY[self.kind].is_identity

    def render(self):
        if self.is_identity and self.layers == 0:
            return self.kind
        return '{}({})'.format(self.kind, self.layers)


# --- load operations -------------------------------------------------------

def _angle_gates(kind):
    def gates(n_qubits, n_features):
        return [SlotGate(kind, (i,), (i,)) for i in range(min(n_features, n_qubits))]
    return gates


def _no_gates(*args):
    return []


register_load_op('AngleX', _angle_gates('RX'), lambda n: n)
register_load_op('AngleY', _angle_gates('RY'), lambda n: n)
register_load_op('AngleZ', _angle_gates('RZ'), lambda n: n)
# Amplitude is a state preparation, not a gate sequence
register_load_op(AMPLITUDE, _no_gates, lambda n: 1 << n)
register_load_op(IDENTITY_LOAD, _no_gates, lambda n: None, is_identity=True)


# --- variational operations ------------------------------------------------

def _ring(n_qubits, r=1):
    if n_qubits == 1:
        return []
    if n_qubits == 2 and r == 1:
        return [SlotGate('CNOT', (0, 1), ())]
    return [SlotGate('CNOT', (i, (i + r) % n_qubits), ()) for i in range(n_qubits)]


def _bel_gates(n_qubits, layers):
    res = []
    for layer in range(layers):
        res.extend(SlotGate('RX', (q,), (layer * n_qubits + q,)) for q in range(n_qubits))
        res.extend(_ring(n_qubits))
    return res


def _sel_gates(n_qubits, layers):
    res = []
    for layer in range(layers):
        base = layer * n_qubits * 3
        res.extend(SlotGate('ROT', (q,), (base + 3 * q, base + 3 * q + 1, base + 3 * q + 2))
                   for q in range(n_qubits))
        if n_qubits > 1:
            r = 1 + layer % (n_qubits - 1)
            res.extend(SlotGate('CNOT', (i, (i + r) % n_qubits), ()) for i in range(n_qubits))
    return res


def _two_design_gates(n_qubits, layers):
    res = [SlotGate('RY', (q,), (q,)) for q in range(n_qubits)]
    if n_qubits == 1:
        return res
    slot = n_qubits
    for _ in range(layers):
        for start in (0, 1):
            for i in range(start, n_qubits - 1, 2):
                res.append(SlotGate('CZ', (i, i + 1), ()))
                res.append(SlotGate('RY', (i,), (slot,)))
                res.append(SlotGate('RY', (i + 1,), (slot + 1,)))
                slot += 2
    return res


def _two_design_count(n_qubits, layers):
    if n_qubits == 1:
        return n_qubits
    return n_qubits + layers * (n_qubits - 1) * 2


def _bell_gates(n_qubits, layers):
    # Stand-in for the unpublished "BellmanLayer": Bell pairs on (0,1), (2,3), ...
    # then a trainable RY on every qubit. An unpaired last qubit only gets the RY.
    res = []
    for layer in range(layers):
        for i in range(0, n_qubits - 1, 2):
            res.append(SlotGate('H', (i,), ()))
            res.append(SlotGate('CNOT', (i, i + 1), ()))
        res.extend(SlotGate('RY', (q,), (layer * n_qubits + q,)) for q in range(n_qubits))
    return res


register_var_op('BEL', _bel_gates, lambda n, layers: layers * n)
register_var_op('SEL', _sel_gates, lambda n, layers: layers * n * 3)
register_var_op('SimplifiedTwoDesign', _two_design_gates, _two_design_count)
register_var_op('BellLayer', _bell_gates, lambda n, layers: layers * n)
register_var_op(IDENTITY_VAR, _no_gates, lambda n, layers: 0, is_identity=True)


# --- expansion -------------------------------------------------------------

def load_gates(spec, n_qubits, n_features):
    check_load_features(spec, n_qubits, n_features)
    return LOAD_REGISTRY[spec.kind].gates(n_qubits, n_features)


def var_gates(spec, n_qubits):
    return VAR_REGISTRY[spec.kind].gates(n_qubits, spec.layers)


def var_param_count(spec, n_qubits):
    return VAR_REGISTRY[spec.kind].param_count(n_qubits, spec.layers)


def check_load_features(spec, n_qubits, n_features):
    limit = LOAD_REGISTRY[spec.kind].max_features(n_qubits)
    if limit is not None and n_features > limit:
        raise ValidationError('{} on {} qubit(s) takes at most {} features, got {}'
                              .format(spec.kind, n_qubits, limit, n_features))


def materialize(slot_gates, values):
    values = np.asarray(values, dtype=np.float64)
    return [simcore.GateOp(g.kind, g.wires, tuple(values[..., s] for s in g.slots)) for g in slot_gates]


def is_ground_state(state, atol=1e-12):
    # |0...0> for every sample of a batch
    ground = np.zeros(state.amplitudes.shape[-1])
    ground[0] = 1.0
    return bool(np.allclose(state.amplitudes, ground, rtol=0.0, atol=atol))


def expand_load(spec, features, n_qubits, state):
    features = np.asarray(features, dtype=np.float64)
    n_features = features.shape[-1] if features.ndim > 0 else 0
    if spec.kind == AMPLITUDE:
        if state.n_applied > 0 or not is_ground_state(state):
            raise ValidationError('Amplitude encoding must be the first operation on a fresh state')
        check_load_features(spec, n_qubits, n_features)
        return simcore.amplitude_encode(features, n_qubits)
    for gate in materialize(load_gates(spec, n_qubits, n_features), features):
        simcore.apply_gate(state, gate)
    return state


def expand_var(spec, params, n_qubits, state):
    params = np.asarray(params, dtype=np.float64)
    expected = var_param_count(spec, n_qubits)
    if params.shape != (expected,):
        raise ValidationError('{} on {} qubit(s) takes {} parameters, got {}'
                              .format(spec.render(), n_qubits, expected, params.shape[0] if params.ndim else 0))
    for gate in materialize(var_gates(spec, n_qubits), params):
        simcore.apply_gate(state, gate)
    return state


# --- notation --------------------------------------------------------------

_TOKEN = re.compile(r'^([A-Za-z][A-Za-z0-9]*)(?:\((\d+)\))?$')


def parse_blocks(text):
    """Parse `Amplitude > SEL(1) > AngleY > SEL(2)` into (load, var) pairs.

    A variational op without a preceding load gets IdentityLoad, a load not
    followed by a variational op gets IdentityVar.
    """
    tokens = [t.strip() for t in text.split('>')]
    if len(tokens) == 0 or any(t == '' for t in tokens):
        raise ValidationError('Malformed architecture: "{}"'.format(text))
    blocks = []
    pending_load = None
    for t in tokens:
        m = _TOKEN.match(t)
        if m is None:
            raise ValidationError('Malformed operation "{}" in "{}"'.format(t, text))
        name, count = m.group(1), m.group(2)
        if name in LOAD_REGISTRY:
            if count is not None:
                raise ValidationError('Load operation {} takes no repetition count'.format(name))
            if pending_load is not None:
                blocks.append((pending_load, VarOpSpec(IDENTITY_VAR, 0)))
            pending_load = LoadOpSpec(name)
        elif name in VAR_REGISTRY:
            if count is None:
                if not VAR_REGISTRY[name].is_identity:
                    raise ValidationError('Variational operation {} needs a repetition count'.format(name))
                count = 0
            var = VarOpSpec(name, int(count))
            load = pending_load if pending_load is not None else LoadOpSpec(IDENTITY_LOAD)
            blocks.append((load, var))
            pending_load = None
        else:
            raise ValidationError('Unknown operation "{}" in "{}"'.format(name, text))
    if pending_load is not None:
        blocks.append((pending_load, VarOpSpec(IDENTITY_VAR, 0)))
    return tuple(blocks)


def render_blocks(blocks):
    tokens = []
    for i, (load, var) in enumerate(blocks):
        if not load.is_identity:
            tokens.append(load.render())
        next_starts_with_load = i + 1 == len(blocks) or not blocks[i + 1][0].is_identity
        if load.is_identity or var.render() != IDENTITY_VAR or not next_starts_with_load:
            tokens.append(var.render())
    return ' > '.join(tokens)
