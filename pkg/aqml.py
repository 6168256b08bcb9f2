"""Automated QML: the ansatz is one more hyperparameter of a random search.

Trial i of a search uses the seed master_seed + i; every finished trial is
appended to a JSONL log before the next one starts, so a search can resume
from the number of logged records.
"""
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
from progress.bar import Bar

import fusion
import qlayers
import qnn
import util
from errors import QfuseError, SearchError, TrainingDivergedError, ValidationError

HEAD_BOTH = 'both'
MODEL_PQC = 'pqc'
MODEL_MLP = 'mlp'

STATUS_OK = 'ok'
STATUS_FAILED = 'failed'
STATUS_PRUNED = 'pruned'

MAX_RESAMPLES = 5

DEFAULT_LOAD_VOCAB = ('AngleX', 'AngleY', 'AngleZ', 'Amplitude')
DEFAULT_VAR_VOCAB = ('BEL', 'SEL', 'SimplifiedTwoDesign', 'BellLayer')


def _interval(value, name):
    lo, hi = value
    if lo > hi:
        raise ValidationError('{}: empty range [{}, {}]'.format(name, lo, hi))
    return lo, hi


class SearchSpace:
    def __init__(
            self,
            n_qubits=6,
            block_count_range=(1, 5),
            load_vocab=DEFAULT_LOAD_VOCAB,
            var_vocab=DEFAULT_VAR_VOCAB,
            var_layers_range=(1, 3),
            head=HEAD_BOTH,
            lr_range=(1e-3, 1e-3),
            batch_size_range=(32, 128),
            extractor_hidden_range=(64, 256),
            extractor_output_range=(4, 12),
            classifier_hidden_range=(64, 256),
            model=MODEL_PQC,
            n_extractors=2,
    ):
        self.n_qubits = int(n_qubits)
        self.block_count_range = tuple(int(v) for v in _interval(block_count_range, 'block_count_range'))
        self.load_vocab = tuple(load_vocab)
        self.var_vocab = tuple(var_vocab)
        self.var_layers_range = tuple(int(v) for v in _interval(var_layers_range, 'var_layers_range'))
        self.head = head
        self.lr_range = tuple(float(v) for v in _interval(lr_range, 'lr_range'))
        self.batch_size_range = tuple(int(v) for v in _interval(batch_size_range, 'batch_size_range'))
        self.extractor_hidden_range = tuple(int(v) for v in _interval(extractor_hidden_range,
                                                                      'extractor_hidden_range'))
        self.extractor_output_range = tuple(int(v) for v in _interval(extractor_output_range,
                                                                      'extractor_output_range'))
        self.classifier_hidden_range = tuple(int(v) for v in _interval(classifier_hidden_range,
                                                                       'classifier_hidden_range'))
        self.model = model
        self.n_extractors = int(n_extractors)
        self.validate()

    def validate(self):
        if self.model not in (MODEL_PQC, MODEL_MLP):
            raise ValidationError('Unknown search model: {}'.format(self.model))
        if self.n_extractors not in (1, 2):
            raise ValidationError('n_extractors must be 1 or 2, got {}'.format(self.n_extractors))
        if self.batch_size_range[0] < 1 or self.extractor_output_range[0] < 1 or self.extractor_hidden_range[0] < 1:
            raise ValidationError('Layer and batch sizes must be positive')
        if self.lr_range[0] < 0:
            raise ValidationError('lr_range must be non-negative')
        if self.model == MODEL_MLP:
            return
        if len(self.load_vocab) == 0 or len(self.var_vocab) == 0:
            raise ValidationError('The load and variational vocabularies must not be empty')
        for k in self.load_vocab:
            qlayers.LoadOpSpec(k)
        for k in self.var_vocab:
            qlayers.VarOpSpec(k, 0 if qlayers.VAR_REGISTRY[k].is_identity else 1)
        if self.block_count_range[0] < 1 or self.block_count_range[1] > qnn.MAX_BLOCKS:
            raise ValidationError('block_count_range must lie within [1, {}]'.format(qnn.MAX_BLOCKS))
        if self.var_layers_range[0] < 1:
            raise ValidationError('var_layers_range must start at 1 or above')
        if self.head not in (fusion.HEAD_SOLO, fusion.HEAD_LINEAR, HEAD_BOTH):
            raise ValidationError('Unknown head: {}'.format(self.head))
        if all(qlayers.LOAD_REGISTRY[k].is_identity for k in self.load_vocab):
            raise ValidationError('A load vocabulary of identities can never upload the input')

    def serialize(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for (k, v) in self.__dict__.items()}

    @staticmethod
    def deserialize(serialized):
        return SearchSpace(**serialized)


def _uniform_int(rng, bounds):
    return int(rng.integers(bounds[0], bounds[1] + 1))


def _sample_blocks(space, rng):
    blocks = []
    for b in range(_uniform_int(rng, space.block_count_range)):
        eligible = [k for k in space.load_vocab if b == 0 or k != qlayers.AMPLITUDE]
        if len(eligible) == 0:
            return None
        load = qlayers.LoadOpSpec(eligible[int(rng.integers(len(eligible)))])
        kind = space.var_vocab[int(rng.integers(len(space.var_vocab)))]
        layers = 0 if qlayers.VAR_REGISTRY[kind].is_identity else _uniform_int(rng, space.var_layers_range)
        blocks.append((load, qlayers.VarOpSpec(kind, layers)))
    return tuple(blocks)


def _sample_common(space, rng):
    lo, hi = space.lr_range
    return {
        'lr': float(lo + (hi - lo) * rng.random()),
        'batch_size': _uniform_int(rng, space.batch_size_range),
        'extractor_hidden': _uniform_int(rng, space.extractor_hidden_range),
    }


def sample_trial(space, rng_seed):
    """Draw (CircuitSpec, hyperparameters); the spec is None for MLP searches."""
    rng = np.random.default_rng(rng_seed)
    hyper = _sample_common(space, rng)
    if space.model == MODEL_MLP:
        hyper['extractor_output'] = _uniform_int(rng, space.extractor_output_range)
        hyper['classifier_hidden'] = _uniform_int(rng, space.classifier_hidden_range)
        hyper['head'] = fusion.HEAD_MLP
        return None, hyper
    for attempt in range(MAX_RESAMPLES + 1):
        blocks = _sample_blocks(space, rng)
        if blocks is None:
            continue
        spec = qnn.CircuitSpec(space.n_qubits, blocks)
        try:
            spec.validate()
        except ValidationError:
            logging.debug('Resampling the invalid architecture: {}'.format(qlayers.render_blocks(blocks)))
            continue
        # the fused vector must fit every load op of the circuit
        hi = min(space.extractor_output_range[1], spec.max_input_features() // space.n_extractors)
        lo = space.extractor_output_range[0]
        if hi < lo:
            logging.debug('No extractor output size fits {} on {} qubit(s)'.format(spec.notation, space.n_qubits))
            continue
        hyper['extractor_output'] = _uniform_int(rng, (lo, hi))
        if space.head == HEAD_BOTH:
            hyper['head'] = (fusion.HEAD_SOLO, fusion.HEAD_LINEAR)[int(rng.integers(2))]
        else:
            hyper['head'] = space.head
        return spec, hyper
    raise ValidationError('The search space did not produce a valid architecture in {} attempts'
                          .format(MAX_RESAMPLES + 1))


def blueprint_for(space, spec, hyper, n_classes, input_widths):
    extractor_sizes = [[w, hyper['extractor_hidden'], hyper['extractor_output']] for w in input_widths]
    if hyper['head'] == fusion.HEAD_MLP:
        return fusion.ModelBlueprint(n_classes, extractor_sizes, fusion.HEAD_MLP, [hyper['classifier_hidden']])
    return fusion.ModelBlueprint(n_classes, extractor_sizes, hyper['head'], architecture=spec.notation,
                                 n_qubits=space.n_qubits)


def dataset_input_widths(dataset):
    widths = [dataset.x_top.shape[1]]
    if dataset.is_dual:
        widths.append(dataset.x_bottom.shape[1])
    return widths


class TrialRecord:
    def __init__(self, trial_id, spec, head, hyperparams, per_fold_metrics, seed, wall_time, n_params=0,
                 classifier_params=0, status=STATUS_OK, error=None):
        self.trial_id = trial_id
        self.spec = spec
        self.head = head
        self.hyperparams = hyperparams
        self.per_fold_metrics = per_fold_metrics
        self.seed = seed
        self.wall_time = wall_time
        self.n_params = n_params
        self.classifier_params = classifier_params
        self.status = status
        self.error = error
        self.mean_accuracy, self.std_accuracy, self.mean_f1_macro = self.aggregates()

    def aggregates(self):
        if len(self.per_fold_metrics) == 0:
            return float('nan'), float('nan'), float('nan')
        mean_acc, std_acc = fusion.mean_std([m.accuracy for m in self.per_fold_metrics])
        mean_f1, _ = fusion.mean_std([m.f1_macro for m in self.per_fold_metrics])
        return mean_acc, std_acc, mean_f1

    @property
    def completed(self):
        return self.status == STATUS_OK

    def serialize(self):
        def num(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        return {
            'trial_id': self.trial_id,
            'spec': self.spec,
            'head': self.head,
            'hyperparams': self.hyperparams,
            'per_fold_metrics': [m.serialize() for m in self.per_fold_metrics],
            'mean_accuracy': num(self.mean_accuracy),
            'std_accuracy': num(self.std_accuracy),
            'mean_f1_macro': num(self.mean_f1_macro),
            'seed': self.seed,
            'wall_time': self.wall_time,
            'n_params': self.n_params,
            'classifier_params': self.classifier_params,
            'status': self.status,
            'error': self.error,
        }

    @staticmethod
    def deserialize(serialized):
        record = TrialRecord(
            serialized['trial_id'],
            serialized['spec'],
            serialized['head'],
            serialized['hyperparams'],
            [fusion.Metrics.deserialize(m) for m in serialized['per_fold_metrics']],
            serialized['seed'],
            serialized['wall_time'],
            serialized.get('n_params', 0),
            serialized.get('classifier_params', 0),
            serialized.get('status', STATUS_OK),
            serialized.get('error'),
        )
        for key in ('mean_accuracy', 'std_accuracy', 'mean_f1_macro'):
            stored = serialized.get(key)
            recomputed = getattr(record, key)
            if stored is None:
                if not math.isnan(recomputed):
                    raise ValidationError('Trial {}: {} is missing'.format(record.trial_id, key))
            elif not math.isclose(stored, recomputed, rel_tol=1e-12, abs_tol=1e-12):
                raise ValidationError('Trial {}: stored {} {} does not match the per-fold metrics ({})'
                                      .format(record.trial_id, key, stored, recomputed))
        return record


class TrialLog:
    """Append-only JSONL trial log."""

    def __init__(self, path):
        self.path = None if path is None else Path(path).expanduser()

    def read(self, repair=False):
        """A partially written last line is skipped, and cut from the file when repair is set."""
        if self.path is None or not self.path.exists():
            return []
        with open(self.path) as f:
            lines = f.readlines()
        torn = len(lines) > 0 and not lines[-1].endswith('\n')
        records = []
        for line_no, line in enumerate(lines, start=1):
            if line.strip() == '':
                continue
            try:
                records.append(TrialRecord.deserialize(json.loads(line)))
            except (ValueError, KeyError, TypeError) as ex:
                if torn and line_no == len(lines):
                    logging.warning('{}:{}: skipping a partially written trial record'.format(self.path, line_no))
                    lines.pop()
                    break
                raise ValidationError('{}:{}: bad trial record ({})'.format(self.path, line_no, ex))
        if torn and repair:
            if len(lines) > 0 and not lines[-1].endswith('\n'):
                lines[-1] += '\n'
            util.atomic_write(self.path, ''.join(lines))
        return records

    def append(self, record):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, 'a') as f:
            f.write(json.dumps(record.serialize(), sort_keys=True) + '\n')
            f.flush()


def _median_fold_one(records):
    values = [r.per_fold_metrics[0].accuracy for r in records if r.completed]
    return float(np.median(values)) if values else None


def run_trial(spec, hyperparams, dataset, config, trial_id=0, space=None, jobs=1, prune_below=None):
    """Cross-validate one sampled model; failures are recorded, never raised."""
    space = space or SearchSpace()
    start = time.monotonic()
    notation = '' if spec is None else spec.notation
    head = hyperparams['head']
    train_config = fusion.TrainConfig(hyperparams['lr'], hyperparams['batch_size'], config.epochs, config.seed,
                                      config.folds)
    metrics = []
    n_params = 0
    classifier_params = 0
    try:
        blueprint = blueprint_for(space, spec, hyperparams, dataset.n_classes, dataset_input_widths(dataset))
        model = fusion.build_model(blueprint, config.seed)
        n_params = model.param_count
        classifier_params = model.classifier_param_count
        if prune_below is None:
            results = fusion.cross_validate(blueprint, dataset, train_config, jobs)
        else:
            results = fusion.cross_validate(blueprint, dataset, train_config, 1, fold_ids=[0])
            if results[0].metrics.accuracy < prune_below:
                logging.info('Trial {} pruned: fold-1 accuracy {:.3f} is below the median {:.3f}'
                             .format(trial_id, results[0].metrics.accuracy, prune_below))
                return TrialRecord(trial_id, notation, head, hyperparams, [r.metrics for r in results], config.seed,
                                   time.monotonic() - start, n_params, classifier_params,
                                   status=STATUS_PRUNED)
            results += fusion.cross_validate(blueprint, dataset, train_config, jobs,
                                             fold_ids=range(1, config.folds))
        metrics = [r.metrics for r in results]
    except (TrainingDivergedError, QfuseError, FloatingPointError) as ex:
        logging.warning('Trial {} ({}) failed: {}'.format(trial_id, notation or head, ex))
        return TrialRecord(trial_id, notation, head, hyperparams, [], config.seed, time.monotonic() - start,
                           n_params, classifier_params, status=STATUS_FAILED, error=str(ex))
    return TrialRecord(trial_id, notation, head, hyperparams, metrics, config.seed, time.monotonic() - start,
                       n_params, classifier_params)


def best_record(records):
    completed = [r for r in records if r.completed]
    if len(completed) == 0:
        return None
    return min(completed, key=lambda r: (-r.mean_accuracy, r.n_params, r.trial_id))


def search(space, dataset, n_trials, master_seed, config, log_path=None, jobs=1, median_pruning=False,
           quiet=True, record_wall_time=True):
    if n_trials < 1:
        raise ValidationError('n_trials must be >= 1, got {}'.format(n_trials))
    log = TrialLog(log_path)
    records = log.read(repair=True)
    if len(records) > 0:
        logging.info('Resuming the search at trial {} from: {}'.format(len(records), log.path))
    bar = None if quiet else Bar('TRIALS', max=n_trials)
    if bar is not None:
        for _ in range(min(len(records), n_trials)):
            bar.next()
    for trial_id in range(len(records), n_trials):
        seed = master_seed + trial_id
        trial_config = fusion.TrainConfig(config.lr, config.batch_size, config.epochs, seed, config.folds)
        try:
            spec, hyper = sample_trial(space, seed)
        except ValidationError as ex:
            raise SearchError('Cannot sample trial {}: {}'.format(trial_id, ex))
        prune_below = _median_fold_one(records) if median_pruning else None
        record = run_trial(spec, hyper, dataset, trial_config, trial_id, space, jobs, prune_below)
        if not record_wall_time:
            # bit-identical logs for a fixed seed
            record.wall_time = 0.0
        log.append(record)
        records.append(record)
        logging.info('Trial {}: {} [{}] accuracy {:.3f}'.format(trial_id, record.spec or record.head, record.status,
                                                                record.mean_accuracy))
        if bar is not None:
            bar.next()
    if bar is not None:
        bar.finish()
    best = best_record(records)
    if best is None:
        raise SearchError('All {} trials failed'.format(len(records)))
    return best, records


def mlp_search(space, dataset, n_trials, master_seed, config, **kwargs):
    """Random search over the classical baseline; same log format, head 'mlp'."""
    if space.model != MODEL_MLP:
        raise ValidationError('mlp_search needs a search space with model = "mlp"')
    return search(space, dataset, n_trials, master_seed, config, **kwargs)
