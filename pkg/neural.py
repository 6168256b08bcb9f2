"""Dense layers, ReLU, softmax cross-entropy and ADAM with closed-form gradients.

All functions take a single sample (1-D) or a batch (2-D, samples in rows).
"""
import numpy as np

from errors import ConfigurationError, ValidationError


class DenseNet:
    def __init__(self, layer_sizes, weights, biases):
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.weights = weights
        self.biases = biases
        if len(self.layer_sizes) < 2:
            raise ValidationError('A dense net needs at least input and output sizes: {}'.format(layer_sizes))
        if len(weights) != len(self.layer_sizes) - 1 or len(biases) != len(self.layer_sizes) - 1:
            raise ConfigurationError('Layer sizes {} need {} weight matrices and bias vectors, got {} and {}'
                                     .format(self.layer_sizes, len(self.layer_sizes) - 1, len(weights), len(biases)))
        for i, (w, b) in enumerate(zip(weights, biases)):
            expected = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ValidationError('Layer {} has shapes {} / {}, expected {} / {}'
                                      .format(i, w.shape, b.shape, expected, (expected[1],)))

    @staticmethod
    def initialize(layer_sizes, rng):
        """Uniform weights and biases in [-1/sqrt(d_in), 1/sqrt(d_in)] per layer."""
        weights = []
        biases = []
        for d_in, d_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            bound = 1.0 / np.sqrt(d_in)
            weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            biases.append(rng.uniform(-bound, bound, size=d_out))
        return DenseNet(layer_sizes, weights, biases)

    @staticmethod
    def zeros(layer_sizes):
        return DenseNet(
            layer_sizes,
            [np.zeros((a, b)) for a, b in zip(layer_sizes[:-1], layer_sizes[1:])],
            [np.zeros(b) for b in layer_sizes[1:]],
        )

    @property
    def d_in(self):
        return self.layer_sizes[0]

    @property
    def d_out(self):
        return self.layer_sizes[-1]

    @property
    def param_count(self):
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def get_flat(self):
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ValidationError('Expected {} parameters, got {}'.format(self.param_count, flat.shape))
        pos = 0
        for i, (a, b) in enumerate(zip(self.layer_sizes[:-1], self.layer_sizes[1:])):
            self.weights[i] = flat[pos:pos + a * b].reshape(a, b).copy()
            pos += a * b
            self.biases[i] = flat[pos:pos + b].copy()
            pos += b

    def copy(self):
        return DenseNet(self.layer_sizes, [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def serialize(self):
        return {
            'layer_sizes': list(self.layer_sizes),
            'params': [float(p) for p in self.get_flat()],
        }

    @staticmethod
    def deserialize(serialized):
        net = DenseNet.zeros(serialized['layer_sizes'])
        net.set_flat(serialized['params'])
        return net


def dense_forward(net, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != net.d_in:
        raise ValidationError('Dense net expects {} inputs, got shape {}'.format(net.d_in, x.shape))
    activations = [x]
    pre_activations = []
    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre_activations.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        activations.append(h)
    return h, (activations, pre_activations)


def dense_backward(net, cache, upstream):
    activations, pre_activations = cache
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != activations[-1].shape:
        raise ValidationError('Upstream gradient shape {} does not match the output shape {}'
                              .format(upstream.shape, activations[-1].shape))
    grads = []
    delta = upstream
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            # ReLU subgradient is 0 at the kink
            delta = delta * (pre_activations[i] > 0)
        a = activations[i]
        if delta.ndim == 1:
            d_w = np.outer(a, delta)
            d_b = delta
        else:
            d_w = a.T @ delta
            d_b = delta.sum(axis=0)
        grads.append((d_w, d_b))
        delta = delta @ net.weights[i].T
    parts = []
    for d_w, d_b in reversed(grads):
        parts.append(d_w.ravel())
        parts.append(d_b)
    return np.concatenate(parts), delta


def softmax(logits):
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_cross_entropy(logits, target_one_hot):
    logits = np.asarray(logits, dtype=np.float64)
    target = np.asarray(target_one_hot, dtype=np.float64)
    if logits.shape != target.shape:
        raise ValidationError('Logits shape {} does not match target shape {}'.format(logits.shape, target.shape))
    if not np.all((target == 0) | (target == 1)) or not np.all(np.sum(target, axis=-1) == 1):
        raise ValidationError('Target is not a one-hot vector: {}'.format(target_one_hot))
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=-1))
    loss = log_z - np.sum(shifted * target, axis=-1)
    return loss, softmax(logits) - target


class AdamState:
    BETA1 = 0.9
    BETA2 = 0.999
    EPSILON = 1e-8

    def __init__(self, n_params, lr):
        if lr < 0:
            raise ValidationError('The learning rate must be non-negative, got {}'.format(lr))
        self.step = 0
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.lr = lr


def adam_step(state, params, grads):
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != state.m.shape or grads.shape != state.m.shape:
        raise ValidationError('ADAM state holds {} parameters, got params {} / grads {}'
                              .format(state.m.shape[0], params.shape, grads.shape))
    state.step += 1
    state.m = AdamState.BETA1 * state.m + (1 - AdamState.BETA1) * grads
    state.v = AdamState.BETA2 * state.v + (1 - AdamState.BETA2) * grads ** 2
    m_hat = state.m / (1 - AdamState.BETA1 ** state.step)
    v_hat = state.v / (1 - AdamState.BETA2 ** state.step)
    return params - state.lr * m_hat / (np.sqrt(v_hat) + AdamState.EPSILON), state
