"""Experiment configuration files.

A configuration is TOML (or JSON when the file name ends in .json). Every
value is checked here, and errors name the offending key as a dotted path,
e.g. "train.lr: must be > 0".
"""
import copy
import json
import os
from pathlib import Path

import toml

import aqml
import fusion
import qnn
import simcore
from errors import ConfigurationError, QfuseError

TASK_MNIST3 = 'mnist3'
TASK_PAIRED_CSV = 'paired_csv'
TASKS = (TASK_MNIST3, TASK_PAIRED_CSV)

MODEL_MLP = 'mlp'
MODEL_PQC_MANUAL = 'pqc_manual'
MODEL_PQC_SEARCH = 'pqc_search'
MODEL_MLP_SEARCH = 'mlp_search'
MODELS = (MODEL_MLP, MODEL_PQC_MANUAL, MODEL_PQC_SEARCH, MODEL_MLP_SEARCH)

DATA_DIR_ENV = 'QFUSE_DATA_DIR'
DEFAULT_MNIST_URL = 'https://storage.googleapis.com/cvdf-datasets/mnist/'

_TOP_LEVEL_KEYS = ('task', 'model', 'architecture', 'n_qubits', 'head')
_SECTIONS = ('paths', 'train', 'extractors', 'classifier', 'search', 'prepare')


class PathsConfig:
    def __init__(self, data_root, mnist_dir, mnist_url, csv_path, prepared_dir, output_dir, trial_log):
        self.data_root = data_root
        self.mnist_dir = mnist_dir
        self.mnist_url = mnist_url
        self.csv_path = csv_path
        self.prepared_dir = prepared_dir
        self.output_dir = output_dir
        self.trial_log = trial_log


class PrepareConfig:
    def __init__(self, keep_classes, threshold, pooling, subsample, pca_components):
        self.keep_classes = keep_classes
        self.threshold = threshold
        self.pooling = pooling
        self.subsample = subsample
        self.pca_components = pca_components

    def serialize(self):
        return {
            'keep_classes': list(self.keep_classes),
            'threshold': self.threshold,
            'pooling': self.pooling,
            'subsample': self.subsample,
            'pca_components': self.pca_components,
        }


class ExperimentConfig:
    def __init__(self, task, model, architecture, n_qubits, head, paths, train, jobs, extractor_hidden,
                 extractor_output, single_extractor, classifier_hidden, search, n_trials, median_pruning,
                 record_wall_time, prepare):
        self.task = task
        self.model = model
        self.architecture = architecture
        self.n_qubits = n_qubits
        self.head = head
        self.paths = paths
        self.train = train
        self.jobs = jobs
        self.extractor_hidden = extractor_hidden
        self.extractor_output = extractor_output
        self.single_extractor = single_extractor
        self.classifier_hidden = classifier_hidden
        # SearchSpace keyword arguments, without n_extractors (that comes from the data)
        self.search = search
        self.n_trials = n_trials
        self.median_pruning = median_pruning
        self.record_wall_time = record_wall_time
        self.prepare = prepare

    @property
    def is_search(self):
        return self.model in (MODEL_PQC_SEARCH, MODEL_MLP_SEARCH)

    def search_space(self, n_extractors):
        return aqml.SearchSpace(n_extractors=n_extractors, **self.search)


class _Section:
    """Typed access to one table of the configuration, tracking which keys were used."""

    def __init__(self, name, values):
        self.name = name
        if not isinstance(values, dict):
            raise ConfigurationError('{}: must be a table'.format(name))
        self.values = values
        self.used = set()

    def path(self, key):
        return key if self.name == '' else '{}.{}'.format(self.name, key)

    def has(self, key):
        return key in self.values

    def get(self, key, kind, default=None, required=False):
        self.used.add(key)
        if key not in self.values:
            if required:
                raise ConfigurationError('{}: is required'.format(self.path(key)))
            return default
        return _coerce(self.values[key], kind, self.path(key))

    def check_unknown(self, known):
        for key in self.values:
            if key not in known:
                raise ConfigurationError('{}: unknown key'.format(self.path(key)))


def _coerce(value, kind, path):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigurationError('{}: must be true or false'.format(path))
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError('{}: must be an integer'.format(path))
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError('{}: must be a number'.format(path))
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigurationError('{}: must be a string'.format(path))
        return value
    if kind == 'int_list':
        if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
            raise ConfigurationError('{}: must be a list of integers'.format(path))
        return value
    if kind == 'str_list':
        if not isinstance(value, list) or any(not isinstance(v, str) for v in value):
            raise ConfigurationError('{}: must be a list of strings'.format(path))
        return value
    if kind in ('int_range', 'float_range'):
        elem = int if kind == 'int_range' else float
        if not isinstance(value, list) or len(value) != 2:
            raise ConfigurationError('{}: must be a [low, high] pair'.format(path))
        lo, hi = (_coerce(v, elem, path) for v in value)
        if lo > hi:
            raise ConfigurationError('{}: empty range [{}, {}]'.format(path, lo, hi))
        return lo, hi
    raise ConfigurationError('{}: unsupported value type'.format(path))


def _require(condition, path, message):
    if not condition:
        raise ConfigurationError('{}: {}'.format(path, message))


def _apply_overrides(config_dict, overrides):
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        keys = dotted.split('.')
        target = config_dict
        for k in keys[:-1]:
            target = target.setdefault(k, {})
        target[keys[-1]] = value


def _read_paths(section):
    data_root = section.get('data_root', str, os.environ.get(DATA_DIR_ENV, 'data'))
    root = Path(data_root).expanduser()
    output_dir = Path(section.get('output_dir', str, 'output')).expanduser()
    res = PathsConfig(
        root,
        Path(section.get('mnist_dir', str, str(root / 'mnist'))).expanduser(),
        section.get('mnist_url', str, DEFAULT_MNIST_URL),
        Path(section.get('csv_path', str, str(root / 'change_pairs.csv'))).expanduser(),
        Path(section.get('prepared_dir', str, str(root / 'prepared'))).expanduser(),
        output_dir,
        Path(section.get('trial_log', str, str(output_dir / 'trials.jsonl'))).expanduser(),
    )
    section.check_unknown(('data_root', 'mnist_dir', 'mnist_url', 'csv_path', 'prepared_dir', 'output_dir',
                           'trial_log'))
    return res


def _read_train(section):
    lr = section.get('lr', float, 1e-3)
    _require(lr > 0, section.path('lr'), 'must be > 0')
    batch_size = section.get('batch_size', int, 32)
    _require(batch_size >= 1, section.path('batch_size'), 'must be >= 1')
    epochs = section.get('epochs', int, 30)
    _require(epochs >= 1, section.path('epochs'), 'must be >= 1')
    seed = section.get('seed', int, 42)
    folds = section.get('folds', int, 5)
    _require(folds >= 2, section.path('folds'), 'must be >= 2')
    jobs = section.get('jobs', int, 1)
    _require(jobs >= 1, section.path('jobs'), 'must be >= 1')
    section.check_unknown(('lr', 'batch_size', 'epochs', 'seed', 'folds', 'jobs'))
    return fusion.TrainConfig(lr, batch_size, epochs, seed, folds), jobs


def _read_search(section, n_qubits, head, model):
    """Returns (SearchSpace kwargs, n_trials, median_pruning, record_wall_time)."""
    kwargs = {
        'n_qubits': n_qubits,
        'head': head,
        'model': aqml.MODEL_MLP if model == MODEL_MLP_SEARCH else aqml.MODEL_PQC,
    }
    for key, kind in (('block_count_range', 'int_range'), ('var_layers_range', 'int_range'),
                      ('lr_range', 'float_range'), ('batch_size_range', 'int_range'),
                      ('extractor_hidden_range', 'int_range'), ('extractor_output_range', 'int_range'),
                      ('classifier_hidden_range', 'int_range'), ('load_vocab', 'str_list'),
                      ('var_vocab', 'str_list')):
        if section.has(key):
            kwargs[key] = section.get(key, kind)
    n_trials = section.get('n_trials', int, 20)
    _require(n_trials >= 1, section.path('n_trials'), 'must be >= 1')
    median_pruning = section.get('median_pruning', bool, False)
    record_wall_time = section.get('record_wall_time', bool, True)
    section.check_unknown(tuple(section.used))
    if 'lr_range' in kwargs:
        _require(kwargs['lr_range'][0] > 0, section.path('lr_range'), 'learning rates must be > 0')
    try:
        aqml.SearchSpace(n_extractors=1, **kwargs)
    except QfuseError as ex:
        raise ConfigurationError('{}: {}'.format(section.name, ex))
    return kwargs, n_trials, median_pruning, record_wall_time


def _read_prepare(section, task):
    keep = section.get('keep_classes', 'int_list', [5, 6, 7])
    _require(len(keep) > 0, section.path('keep_classes'), 'must not be empty')
    _require(all(0 <= k <= 9 for k in keep), section.path('keep_classes'), 'digits must lie in [0, 9]')
    threshold = section.get('threshold', float, 0.5)
    _require(0.0 <= threshold < 1.0, section.path('threshold'), 'must lie in [0, 1)')
    pooling = section.get('pooling', str, 'mean')
    _require(pooling in ('mean', 'max'), section.path('pooling'), 'must be "mean" or "max"')
    fraction = section.get('subsample', float, 1.0)
    _require(0.0 < fraction <= 1.0, section.path('subsample'), 'must lie in (0, 1]')
    # the change task reduces every source to four features by default
    pca = section.get('pca_components', int, 4 if task == TASK_PAIRED_CSV else 0)
    _require(pca >= 0, section.path('pca_components'), 'must be >= 0 (0 disables PCA)')
    section.check_unknown(('keep_classes', 'threshold', 'pooling', 'subsample', 'pca_components'))
    return PrepareConfig(sorted(set(keep)), threshold, pooling, fraction, pca)


def parse_config(config_dict, overrides=None):
    config_dict = copy.deepcopy(config_dict)
    _apply_overrides(config_dict, overrides)
    top = _Section('', config_dict)
    top.check_unknown(_TOP_LEVEL_KEYS + _SECTIONS)

    task = top.get('task', str, required=True)
    _require(task in TASKS, 'task', 'must be one of {}'.format(', '.join(TASKS)))
    model = top.get('model', str, required=True)
    _require(model in MODELS, 'model', 'must be one of {}'.format(', '.join(MODELS)))
    is_pqc = model in (MODEL_PQC_MANUAL, MODEL_PQC_SEARCH)

    architecture = top.get('architecture', str)
    has_search = top.has('search')
    if model == MODEL_PQC_MANUAL:
        _require(architecture is not None, 'architecture', 'is required for model "pqc_manual"')
        _require(not has_search, 'search', 'a fixed architecture and a search are mutually exclusive')
    elif model in (MODEL_PQC_SEARCH, MODEL_MLP_SEARCH):
        _require(architecture is None, 'architecture', 'a fixed architecture and a search are mutually exclusive')
        _require(has_search, 'search', 'is required for model "{}"'.format(model))
    else:
        _require(architecture is None, 'architecture', 'is only used by PQC models')
        _require(not has_search, 'search', 'is only used by search models')

    n_qubits = top.get('n_qubits', int, 6 if task == TASK_MNIST3 else 8)
    _require(1 <= n_qubits <= simcore.MAX_QUBITS, 'n_qubits',
             'must lie in [1, {}]'.format(simcore.MAX_QUBITS))
    head = top.get('head', str, aqml.HEAD_BOTH if model == MODEL_PQC_SEARCH else
                   (fusion.HEAD_SOLO if is_pqc else fusion.HEAD_MLP))
    if model == MODEL_PQC_MANUAL:
        _require(head in (fusion.HEAD_SOLO, fusion.HEAD_LINEAR), 'head', 'must be "solo" or "linear"')
    elif model == MODEL_PQC_SEARCH:
        _require(head in (fusion.HEAD_SOLO, fusion.HEAD_LINEAR, aqml.HEAD_BOTH), 'head',
                 'must be "solo", "linear" or "both"')
    else:
        _require(head == fusion.HEAD_MLP, 'head', 'classical models use the "mlp" head')

    if architecture is not None:
        try:
            qnn.CircuitSpec.from_notation(architecture, n_qubits).validate()
        except QfuseError as ex:
            raise ConfigurationError('architecture: {}'.format(ex))

    paths = _read_paths(_Section('paths', config_dict.get('paths', {})))
    train, jobs = _read_train(_Section('train', config_dict.get('train', {})))

    extractors = _Section('extractors', config_dict.get('extractors', {}))
    extractor_hidden = extractors.get('hidden', int, 64)
    _require(extractor_hidden >= 1, 'extractors.hidden', 'must be >= 1')
    extractor_output = extractors.get('output', int, 6)
    _require(extractor_output >= 1, 'extractors.output', 'must be >= 1')
    single = extractors.get('single', bool, task == TASK_PAIRED_CSV)
    _require(single or task == TASK_MNIST3, 'extractors.single', 'paired CSV data always uses one extractor')
    extractors.check_unknown(('hidden', 'output', 'single'))

    classifier = _Section('classifier', config_dict.get('classifier', {}))
    classifier_hidden = classifier.get('hidden', 'int_list', [])
    _require(all(h >= 1 for h in classifier_hidden), 'classifier.hidden', 'layer sizes must be >= 1')
    classifier.check_unknown(('hidden',))

    search = None
    n_trials = 0
    median_pruning = False
    record_wall_time = True
    if has_search:
        search, n_trials, median_pruning, record_wall_time = _read_search(
            _Section('search', config_dict['search']), n_qubits, head, model)

    prepare = _read_prepare(_Section('prepare', config_dict.get('prepare', {})), task)

    return ExperimentConfig(task, model, architecture, n_qubits, head, paths, train, jobs, extractor_hidden,
                            extractor_output, single, classifier_hidden, search, n_trials, median_pruning,
                            record_wall_time, prepare)


def read_config(filename, overrides=None):
    path = Path(filename).expanduser()
    if not path.exists():
        raise ConfigurationError('{}: no such configuration file'.format(path))
    with open(path) as f:
        text = f.read()
    try:
        config_dict = json.loads(text) if path.suffix == '.json' else toml.loads(text)
    except (ValueError, toml.TomlDecodeError) as ex:
        raise ConfigurationError('{}: cannot parse the configuration ({})'.format(path, ex))
    return parse_config(config_dict, overrides)
