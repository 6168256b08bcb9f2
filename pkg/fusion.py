"""Feature-level fusion model: per-source extractors, concatenation, classifier head.

Heads:
    mlp     - a dense classifier on the fused vector
    solo    - a PQC whose first n_classes <Z> values are the logits
    linear  - a PQC followed by one dense layer n_qubits -> n_classes
"""
import concurrent.futures
import json
import logging
import time
from pathlib import Path

import numpy as np
import semver
from progress.bar import Bar
from sklearn.metrics import accuracy_score, precision_recall_fscore_support
from sklearn.metrics import confusion_matrix as sk_confusion_matrix

import neural
import qnn
import util
from errors import ModelFormatError, TrainingDivergedError, ValidationError

HEAD_MLP = 'mlp'
HEAD_SOLO = 'solo'
HEAD_LINEAR = 'linear'
HEADS = (HEAD_MLP, HEAD_SOLO, HEAD_LINEAR)

MODEL_FORMAT = 'qfuse-model'
MODEL_FORMAT_VERSION = '1.0.0'


class ModelBlueprint:
    def __init__(self, n_classes, extractor_sizes, head, classifier_hidden=(), architecture=None, n_qubits=None):
        self.n_classes = int(n_classes)
        self.extractor_sizes = [list(map(int, s)) for s in extractor_sizes]
        self.head = head
        self.classifier_hidden = [int(h) for h in classifier_hidden]
        self.architecture = architecture
        self.n_qubits = None if n_qubits is None else int(n_qubits)
        self.validate()

    def validate(self):
        if self.head not in HEADS:
            raise ValidationError('Unknown classifier head: {}'.format(self.head))
        if len(self.extractor_sizes) not in (1, 2):
            raise ValidationError('A fusion model has one or two extractors, got {}'.format(len(self.extractor_sizes)))
        if self.n_classes < 2:
            raise ValidationError('At least two classes are needed, got {}'.format(self.n_classes))
        if self.head != HEAD_MLP:
            if self.architecture is None or self.n_qubits is None:
                raise ValidationError('A PQC head needs an architecture and a qubit count')
            if self.head == HEAD_SOLO and self.n_qubits < self.n_classes:
                raise ValidationError('A solo PQC head reads {} classes from {} qubit(s)'
                                      .format(self.n_classes, self.n_qubits))

    @property
    def fused_width(self):
        return sum(s[-1] for s in self.extractor_sizes)

    @property
    def is_dual(self):
        return len(self.extractor_sizes) == 2

    def circuit_spec(self):
        return qnn.CircuitSpec.from_notation(self.architecture, self.n_qubits)

    def serialize(self):
        return {
            'n_classes': self.n_classes,
            'extractor_sizes': self.extractor_sizes,
            'head': self.head,
            'classifier_hidden': self.classifier_hidden,
            'architecture': self.architecture,
            'n_qubits': self.n_qubits,
        }

    @staticmethod
    def deserialize(serialized):
        return ModelBlueprint(
            serialized['n_classes'],
            serialized['extractor_sizes'],
            serialized['head'],
            serialized.get('classifier_hidden', []),
            serialized.get('architecture'),
            serialized.get('n_qubits'),
        )


class FusionModel:
    def __init__(self, blueprint, extractors, classifier=None, binding=None, pqc_params=None, linear=None):
        self.blueprint = blueprint
        self.extractors = extractors
        self.classifier = classifier
        self.binding = binding
        self.pqc_params = pqc_params
        self.linear = linear
        if self.binding is not None:
            limit = self.binding.spec.max_input_features()
            if blueprint.fused_width > limit:
                raise ValidationError('The fused vector has {} features but {} on {} qubit(s) accepts at most {}'
                                      .format(blueprint.fused_width, self.binding.spec.notation,
                                              self.binding.n_qubits, limit))

    @property
    def n_classes(self):
        return self.blueprint.n_classes

    @property
    def head(self):
        return self.blueprint.head

    def _parts(self):
        # flattening order
        parts = list(self.extractors)
        if self.classifier is not None:
            parts.append(self.classifier)
        if self.binding is not None:
            parts.append('pqc')
        if self.linear is not None:
            parts.append(self.linear)
        return parts

    @property
    def extractor_param_count(self):
        return sum(e.param_count for e in self.extractors)

    @property
    def classifier_param_count(self):
        res = 0
        if self.classifier is not None:
            res += self.classifier.param_count
        if self.binding is not None:
            res += self.binding.total_params
        if self.linear is not None:
            res += self.linear.param_count
        return res

    @property
    def param_count(self):
        return self.extractor_param_count + self.classifier_param_count

    def get_flat(self):
        chunks = []
        for p in self._parts():
            chunks.append(self.pqc_params if p == 'pqc' else p.get_flat())
        return np.concatenate(chunks)

    def set_flat(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.param_count,):
            raise ValidationError('Expected {} parameters, got {}'.format(self.param_count, flat.shape))
        pos = 0
        for p in self._parts():
            size = self.binding.total_params if p == 'pqc' else p.param_count
            if p == 'pqc':
                self.pqc_params = flat[pos:pos + size].copy()
            else:
                p.set_flat(flat[pos:pos + size])
            pos += size


def build_model(blueprint, seed):
    rng = np.random.default_rng(seed)
    extractors = [neural.DenseNet.initialize(sizes, rng) for sizes in blueprint.extractor_sizes]
    if blueprint.head == HEAD_MLP:
        sizes = [blueprint.fused_width] + blueprint.classifier_hidden + [blueprint.n_classes]
        return FusionModel(blueprint, extractors, classifier=neural.DenseNet.initialize(sizes, rng))
    binding = qnn.bind(blueprint.circuit_spec())
    pqc_params = qnn.init_params(binding, rng)
    linear = None
    if blueprint.head == HEAD_LINEAR:
        linear = neural.DenseNet.initialize([blueprint.n_qubits, blueprint.n_classes], rng)
    return FusionModel(blueprint, extractors, binding=binding, pqc_params=pqc_params, linear=linear)


def _inputs(model, x_top, x_bottom):
    if model.blueprint.is_dual and x_bottom is None:
        raise ValidationError('This model has two extractors and needs a bottom input')
    if not model.blueprint.is_dual and x_bottom is not None:
        raise ValidationError('This model has a single extractor and takes no bottom input')
    return [x_top] if x_bottom is None else [x_top, x_bottom]


def _forward(model, x_top, x_bottom):
    caches = []
    outputs = []
    for net, x in zip(model.extractors, _inputs(model, x_top, x_bottom)):
        out, cache = neural.dense_forward(net, x)
        outputs.append(out)
        caches.append(cache)
    fused = np.concatenate(outputs, axis=-1)
    head_cache = None
    if model.head == HEAD_MLP:
        logits, head_cache = neural.dense_forward(model.classifier, fused)
    else:
        expvals = qnn.pqc_forward(model.binding, model.pqc_params, fused)
        if model.head == HEAD_SOLO:
            logits = expvals[..., :model.n_classes]
        else:
            logits, head_cache = neural.dense_forward(model.linear, expvals)
    return logits, (caches, fused, head_cache)


def _backward(model, cache, d_logits):
    caches, fused, head_cache = cache
    grads = []
    if model.head == HEAD_MLP:
        d_head, d_fused = neural.dense_backward(model.classifier, head_cache, d_logits)
        head_grads = [d_head]
    else:
        if model.head == HEAD_SOLO:
            d_expvals = np.zeros(d_logits.shape[:-1] + (model.binding.n_qubits,))
            d_expvals[..., :model.n_classes] = d_logits
        else:
            d_linear, d_expvals = neural.dense_backward(model.linear, head_cache, d_logits)
        d_pqc, d_fused = qnn.pqc_vjp(model.binding, model.pqc_params, fused, d_expvals)
        if fused.ndim == 1:
            d_fused = d_fused[0]
        head_grads = [d_pqc] if model.head == HEAD_SOLO else [d_pqc, d_linear]
    start = 0
    for net, c in zip(model.extractors, caches):
        width = net.d_out
        d_net, _ = neural.dense_backward(net, c, d_fused[..., start:start + width])
        grads.append(d_net)
        start += width
    return np.concatenate(grads + head_grads)


def model_forward(model, x_top, x_bottom=None):
    logits, _ = _forward(model, x_top, x_bottom)
    return logits


def loss_and_gradient(model, x_top, x_bottom, targets):
    """Mean cross-entropy over the batch and its gradient w.r.t. the flat parameters."""
    logits, cache = _forward(model, x_top, x_bottom)
    losses, d_logits = neural.softmax_cross_entropy(logits, targets)
    n = losses.shape[0] if np.ndim(losses) else 1
    return float(np.mean(losses)), _backward(model, cache, d_logits / n)


def predict(model, x_top, x_bottom=None):
    # np.argmax returns the first maximum, so ties go to the lowest index
    return np.argmax(model_forward(model, x_top, x_bottom), axis=-1)


class TrainConfig:
    def __init__(self, lr=1e-3, batch_size=32, epochs=30, seed=42, folds=5):
        self.lr = float(lr)
        self.batch_size = int(batch_size)
        self.epochs = int(epochs)
        self.seed = int(seed)
        self.folds = int(folds)
        if self.lr < 0:
            raise ValidationError('lr must be non-negative, got {}'.format(self.lr))
        if self.batch_size < 1:
            raise ValidationError('batch_size must be >= 1, got {}'.format(self.batch_size))
        if self.epochs < 0:
            raise ValidationError('epochs must be >= 0, got {}'.format(self.epochs))
        if self.folds < 2:
            raise ValidationError('folds must be >= 2, got {}'.format(self.folds))

    def serialize(self):
        return {'lr': self.lr, 'batch_size': self.batch_size, 'epochs': self.epochs, 'seed': self.seed,
                'folds': self.folds}

    @staticmethod
    def deserialize(serialized):
        return TrainConfig(**serialized)


def train(model, train_set, config, quiet=True):
    if len(train_set) == 0:
        raise ValidationError('Cannot train on an empty data set')
    if train_set.labels.max() >= model.n_classes:
        raise ValidationError('Labels must lie in [0, {})'.format(model.n_classes))
    rng = np.random.default_rng(config.seed)
    targets = np.eye(model.n_classes)[train_set.labels]
    params = model.get_flat()
    adam = neural.AdamState(params.shape[0], config.lr)
    history = []
    bar = None if quiet else Bar('TRAINING', max=config.epochs)
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x_bottom = train_set.x_bottom[idx] if train_set.is_dual else None
            loss, grads = loss_and_gradient(model, train_set.x_top[idx], x_bottom, targets[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grads)):
                raise TrainingDivergedError('Non-finite loss in epoch {}'.format(epoch + 1))
            params, adam = neural.adam_step(adam, params, grads)
            model.set_flat(params)
            total += loss * len(idx)
        history.append(total / len(train_set))
        logging.debug('Epoch {}: mean loss {:.6f}'.format(epoch + 1, history[-1]))
        if bar is not None:
            bar.next()
    if bar is not None:
        bar.finish()
    return model, history


class Metrics:
    def __init__(self, confusion):
        self.confusion = np.asarray(confusion, dtype=np.int64)
        k = self.confusion.shape[0]
        # expand the matrix back into one (true, predicted) pair per sample
        true_idx, pred_idx = np.indices(self.confusion.shape)
        y_true = np.repeat(true_idx.ravel(), self.confusion.ravel())
        y_pred = np.repeat(pred_idx.ravel(), self.confusion.ravel())
        if len(y_true) == 0:
            self.accuracy = 0.0
            self.precision_macro = self.recall_macro = self.f1_macro = 0.0
            return
        precision, recall, f1, _ = precision_recall_fscore_support(
            y_true, y_pred, labels=list(range(k)), average='macro', zero_division=0)
        self.accuracy = float(accuracy_score(y_true, y_pred))
        self.precision_macro = float(precision)
        self.recall_macro = float(recall)
        self.f1_macro = float(f1)

    def serialize(self):
        return {
            'accuracy': self.accuracy,
            'precision_macro': self.precision_macro,
            'recall_macro': self.recall_macro,
            'f1_macro': self.f1_macro,
            'confusion': self.confusion.tolist(),
        }

    @staticmethod
    def deserialize(serialized):
        return Metrics(serialized['confusion'])


def confusion_matrix(y_true, y_pred, n_classes):
    return sk_confusion_matrix(y_true, y_pred, labels=list(range(n_classes))).astype(np.int64)


def evaluate(model, test_set):
    if len(test_set) == 0:
        raise ValidationError('Cannot evaluate on an empty data set')
    predictions = predict(model, test_set.x_top, test_set.x_bottom)
    return Metrics(confusion_matrix(test_set.labels, predictions, model.n_classes))


def kfold(dataset, k, seed):
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if k < 2:
        raise ValidationError('k-fold needs k >= 2, got {}'.format(k))
    if n < k:
        raise ValidationError('Cannot split {} samples into {} folds'.format(n, k))
    order = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(order, k)
    res = []
    for i, val in enumerate(folds):
        train_idx = np.concatenate([f for (j, f) in enumerate(folds) if j != i])
        res.append((train_idx, val))
    return res


def mean_std(values):
    values = np.asarray(values, dtype=np.float64)
    std = float(values.std(ddof=1)) if values.shape[0] > 1 else 0.0
    return float(values.mean()), std


def format_mean_std(mean, std):
    return '{:.3f} ± {:.3f}'.format(mean, std)


class FoldResult:
    def __init__(self, fold, metrics, history, model, wall_time):
        self.fold = fold
        self.metrics = metrics
        self.history = history
        self.model = model
        self.wall_time = wall_time


def run_fold(blueprint, dataset, split, config, fold):
    start = time.monotonic()
    train_idx, val_idx = split
    # every fold starts from the same initialization, shuffling differs per fold
    model = build_model(blueprint, config.seed)
    fold_config = TrainConfig(config.lr, config.batch_size, config.epochs, config.seed + fold, config.folds)
    model, history = train(model, dataset.subset(train_idx), fold_config)
    metrics = evaluate(model, dataset.subset(val_idx))
    logging.info('Fold {}: accuracy {:.3f}, f1_macro {:.3f}'.format(fold + 1, metrics.accuracy, metrics.f1_macro))
    return FoldResult(fold, metrics, history, model, time.monotonic() - start)


def cross_validate(blueprint, dataset, config, jobs=1, fold_ids=None, quiet=True):
    splits = kfold(dataset, config.folds, config.seed)
    fold_ids = list(range(config.folds)) if fold_ids is None else list(fold_ids)
    results = []
    bar = None if quiet else Bar('FOLDS', max=len(fold_ids))
    if jobs > 1 and len(fold_ids) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_fold, blueprint, dataset, splits[i], config, i) for i in fold_ids]
            for fut in futures:
                results.append(fut.result())
                if bar is not None:
                    bar.next()
    else:
        for i in fold_ids:
            results.append(run_fold(blueprint, dataset, splits[i], config, i))
            if bar is not None:
                bar.next()
    if bar is not None:
        bar.finish()
    return results


# --- model files -----------------------------------------------------------

def serialize_model(model, config=None):
    parts = {'extractors': [e.serialize() for e in model.extractors]}
    if model.classifier is not None:
        parts['classifier'] = model.classifier.serialize()
    if model.binding is not None:
        parts['pqc_params'] = [float(p) for p in model.pqc_params]
    if model.linear is not None:
        parts['linear'] = model.linear.serialize()
    return {
        'format': MODEL_FORMAT,
        'version': MODEL_FORMAT_VERSION,
        'blueprint': model.blueprint.serialize(),
        'architecture': model.blueprint.architecture,
        'parameters': parts,
        'param_counts': {
            'extractors': model.extractor_param_count,
            'classifier': model.classifier_param_count,
            'total': model.param_count,
        },
        'seed': None if config is None else config.seed,
        'config': None if config is None else config.serialize(),
    }


def deserialize_model(serialized):
    if serialized.get('format') != MODEL_FORMAT:
        raise ModelFormatError('Not a qfuse model file')
    version = serialized.get('version', '0.0.0')
    try:
        found = semver.VersionInfo.parse(version)
    except ValueError:
        raise ModelFormatError('Malformed model file version: {}'.format(version))
    supported = semver.VersionInfo.parse(MODEL_FORMAT_VERSION)
    if found.major != supported.major or found > supported:
        raise ModelFormatError('Model file version {} is not supported (this build reads {}.x up to {})'
                               .format(version, supported.major, MODEL_FORMAT_VERSION))
    blueprint = ModelBlueprint.deserialize(serialized['blueprint'])
    parts = serialized['parameters']
    model = build_model(blueprint, 0)
    model.extractors = [neural.DenseNet.deserialize(e) for e in parts['extractors']]
    if 'classifier' in parts:
        model.classifier = neural.DenseNet.deserialize(parts['classifier'])
    if 'pqc_params' in parts:
        model.pqc_params = np.array(parts['pqc_params'], dtype=np.float64)
    if 'linear' in parts:
        model.linear = neural.DenseNet.deserialize(parts['linear'])
    return model


def save_model(model, path, config=None):
    util.atomic_write(path, json.dumps(serialize_model(model, config), indent=1) + '\n')


def load_model(path):
    path = Path(path).expanduser()
    with open(path) as f:
        try:
            serialized = json.load(f)
        except ValueError:
            raise ModelFormatError('The model file is not valid JSON: {}'.format(path))
    return deserialize_model(serialized)
