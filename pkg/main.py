# qfuse - Hybrid quantum-classical multisource fusion experiments: command line harness
# This program is licensed under The MIT License

import sys
import argparse
import logging
import datetime
import gzip
import requests
from pathlib import Path
from progress.bar import Bar
import config
import data
import fusion
import aqml
import report
import util
from errors import QfuseError, ConfigurationError, IngestionError, ModelFormatError, SearchError

MNIST_FILES = {
    'train_images': 'train-images-idx3-ubyte',
    'train_labels': 'train-labels-idx1-ubyte',
    'test_images': 't10k-images-idx3-ubyte',
    'test_labels': 't10k-labels-idx1-ubyte',
}


def start_logging(log_path, verbosity, no_warning):
    print('Enabled logging to the log file.')
    logging.basicConfig(filename=log_path)
    # Temporarily increase log level to show mandatory messages
    logging.getLogger().setLevel(logging.INFO)
    logging.info('--- Start of the qfuse log from date (UTC): {} ---'.format(
        datetime.datetime.now(datetime.timezone.utc)))
    if verbosity == 0:
        if no_warning:
            logging.getLogger().setLevel(logging.ERROR)
        else:
            logging.getLogger().setLevel(logging.WARNING)
    elif verbosity == 1:
        logging.getLogger().setLevel(logging.INFO)
    else:
        logging.getLogger().setLevel(logging.DEBUG)


def load_config(conf_path, overrides):
    logging.info('Reading the configuration from: {}...'.format(conf_path))
    return config.read_config(conf_path, overrides)


def command_overrides(args):
    overrides = {
        'train.seed': getattr(args, 'seed', None),
        'train.jobs': getattr(args, 'jobs', None),
        'train.epochs': getattr(args, 'epochs', None),
        'train.folds': getattr(args, 'folds', None),
        'prepare.subsample': getattr(args, 'subsample', None),
        'search.n_trials': getattr(args, 'trials', None),
    }
    if getattr(args, 'no_timing', False):
        overrides['search.record_wall_time'] = False
    return overrides


def initialize_command(args):
    if args.log is not None:
        start_logging(args.log, args.verbose, args.nowarn)
    try:
        return load_config(args.config, command_overrides(args))
    except ConfigurationError as e:
        logging.error('Invalid configuration: {}'.format(e))
        print('Invalid configuration: {}'.format(e))
        return None


def prepared_prefix(conf, split):
    if conf.task == config.TASK_MNIST3:
        return conf.paths.prepared_dir / '{}_{}'.format(conf.task, split)
    return conf.paths.prepared_dir / conf.task


def load_prepared(conf, split='train', prefix=None):
    logging.info('Loading the prepared samples...')
    dataset = data.read_prepared(prefix if prefix is not None else prepared_prefix(conf, split))
    if conf.single_extractor:
        dataset = dataset.concatenated()
    return dataset


def model_title(conf):
    title = report.HEAD_TITLES[conf.head]
    if conf.architecture is not None:
        title += ' ({})'.format(conf.architecture)
    return title


def model_blueprint(conf, dataset):
    widths = [dataset.x_top.shape[1]]
    if dataset.is_dual:
        widths.append(dataset.x_bottom.shape[1])
    extractor_sizes = [[w, conf.extractor_hidden, conf.extractor_output] for w in widths]
    if conf.model == config.MODEL_MLP:
        return fusion.ModelBlueprint(dataset.n_classes, extractor_sizes, fusion.HEAD_MLP, conf.classifier_hidden)
    return fusion.ModelBlueprint(dataset.n_classes, extractor_sizes, conf.head, architecture=conf.architecture,
                                 n_qubits=conf.n_qubits)


def do_fetch(conf, force=False):
    target = conf.paths.mnist_dir
    target.mkdir(parents=True, exist_ok=True)
    bar = Bar('DOWNLOADING', max=len(MNIST_FILES))
    for name in MNIST_FILES.values():
        path = target / name
        if path.exists() and not force:
            logging.info('Skipping the existing file: {}'.format(path))
            bar.next()
            continue
        url = conf.paths.mnist_url.rstrip('/') + '/' + name + '.gz'
        logging.info('Downloading: {}...'.format(url))
        try:
            r = requests.get(url, timeout=120)
        except requests.RequestException as e:
            bar.finish()
            logging.error('Could not download {}: {}'.format(url, e))
            print('Could not download {}: {}'.format(url, e))
            return -1
        if r.status_code != 200:
            bar.finish()
            logging.error('Unexpected HTTP status code {} (expected 200) for: {}'.format(r.status_code, url))
            print('Unexpected HTTP status code {} for: {}'.format(r.status_code, url))
            return -1
        try:
            content = gzip.decompress(r.content)
        except OSError:
            bar.finish()
            logging.error('The response from {} is not a gzip archive.'.format(url))
            return -1
        util.atomic_write(path, content, binary=True)
        bar.next()
    bar.finish()
    print('MNIST files are in: {}'.format(target))
    return 0


def _is_up_to_date(prefix, pipeline):
    sidecar = data.read_prepared_sidecar(prefix)
    if sidecar is None or not Path(prefix).with_suffix('.csv').exists():
        return False
    return sidecar.get('pipeline_hash') == util.stable_hash(pipeline)


def _prepare_mnist3(conf):
    written = 0
    for split in ('train', 'test'):
        images = conf.paths.mnist_dir / MNIST_FILES[split + '_images']
        labels = conf.paths.mnist_dir / MNIST_FILES[split + '_labels']
        for p in (images, labels):
            if not p.exists():
                raise IngestionError('Input file not found (run the fetch command first)', p)
        pipeline = dict(conf.prepare.serialize(), task=conf.task, seed=conf.train.seed,
                        inputs=[util.file_digest(images), util.file_digest(labels)])
        prefix = prepared_prefix(conf, split)
        if _is_up_to_date(prefix, pipeline):
            print('{}: up to date'.format(prefix))
            continue
        raw = data.filter_classes(data.load_mnist_idx(images, labels), conf.prepare.keep_classes)
        samples = data.multisource_sample_set(raw, conf.prepare.threshold, conf.prepare.pooling)
        samples = data.subsample(samples, conf.prepare.subsample, conf.train.seed)
        provenance = {'images': str(images), 'labels': str(labels)}
        data.write_prepared(samples, prefix, provenance, pipeline)
        print('{}: wrote {} samples'.format(prefix, len(samples)))
        written += 1
    return written


def _prepare_paired_csv(conf, synthetic):
    csv_path = conf.paths.csv_path
    if synthetic is not None:
        before, after, labels = data.make_synthetic_change_task(synthetic, seed=conf.train.seed)
        if not csv_path.exists() or data.load_paired_csv(csv_path).x_top.shape[0] != synthetic:
            logging.info('Writing a synthetic change task to: {}'.format(csv_path))
            data.write_paired_csv(csv_path, before, after, labels)
    if not csv_path.exists():
        raise IngestionError('Input file not found', csv_path)
    pipeline = dict(conf.prepare.serialize(), task=conf.task, seed=conf.train.seed,
                    inputs=[util.file_digest(csv_path)])
    prefix = prepared_prefix(conf, 'train')
    if _is_up_to_date(prefix, pipeline):
        print('{}: up to date'.format(prefix))
        return 0
    samples = data.subsample(data.load_paired_csv(csv_path), conf.prepare.subsample, conf.train.seed)
    provenance = {'csv': str(csv_path)}
    if conf.prepare.pca_components > 0:
        samples, models = data.reduce_sources(samples, conf.prepare.pca_components)
        provenance['pca'] = [m.serialize() for m in models]
        logging.info('Explained variance ratio per source: {}'.format(
            ', '.join('{:.4f}'.format(float(m.explained_variance_ratio.sum())) for m in models)))
    data.write_prepared(samples, prefix, provenance, pipeline)
    print('{}: wrote {} samples'.format(prefix, len(samples)))
    return 1


def do_prepare(conf, synthetic=None):
    logging.info('Preparing the {} samples...'.format(conf.task))
    try:
        if conf.task == config.TASK_MNIST3:
            _prepare_mnist3(conf)
        else:
            _prepare_paired_csv(conf, synthetic)
    except QfuseError as e:
        logging.error('Could not prepare the samples: {}'.format(e))
        print('Could not prepare the samples: {}'.format(e))
        return -1
    return 0


def do_train(conf, model_path=None, metrics_path=None):
    if conf.is_search:
        print('The configured model is a search; use the search command.')
        return -1
    try:
        dataset = load_prepared(conf)
        blueprint = model_blueprint(conf, dataset)
        # validates the whole model before any training starts
        model = fusion.build_model(blueprint, conf.train.seed)
    except QfuseError as e:
        logging.error('Cannot build the model: {}'.format(e))
        print('Cannot build the model: {}'.format(e))
        return -1

    logging.info('Training {} with {} folds on {} samples...'.format(model_title(conf), conf.train.folds,
                                                                    len(dataset)))
    try:
        results = fusion.cross_validate(blueprint, dataset, conf.train, conf.jobs, quiet=False)
    except QfuseError as e:
        logging.error('Training failed: {}'.format(e))
        print('Training failed: {}'.format(e))
        return -1

    rows = [r.metrics.serialize() for r in results]
    print(report.model_report(model_title(conf), model.extractor_param_count, model.classifier_param_count, rows))

    # keep the fold model with the best validation accuracy, first fold on ties
    best = max(results, key=lambda r: (r.metrics.accuracy, -r.fold))
    out = conf.paths.output_dir
    model_path = model_path if model_path is not None else out / '{}_model.json'.format(conf.model)
    metrics_path = metrics_path if metrics_path is not None else out / '{}_metrics.csv'.format(conf.model)
    logging.info('Saving the fold {} model to: {}'.format(best.fold + 1, model_path))
    fusion.save_model(best.model, model_path, conf.train)
    report.write_metrics_csv(metrics_path, [r.metrics for r in results])
    print('Model: {}'.format(model_path))
    print('Metrics: {}'.format(metrics_path))
    return 0


def do_search(conf):
    if not conf.is_search:
        print('The configured model has no [search] section; use the train command.')
        return -1
    try:
        dataset = load_prepared(conf)
        space = conf.search_space(2 if dataset.is_dual else 1)
    except QfuseError as e:
        logging.error('Cannot set up the search: {}'.format(e))
        print('Cannot set up the search: {}'.format(e))
        return -1

    logging.info('Searching {} trials with the master seed {}...'.format(conf.n_trials, conf.train.seed))
    try:
        best, records = aqml.search(space, dataset, conf.n_trials, conf.train.seed, conf.train,
                                    log_path=conf.paths.trial_log, jobs=conf.jobs,
                                    median_pruning=conf.median_pruning, quiet=False,
                                    record_wall_time=conf.record_wall_time)
    except SearchError as e:
        logging.error('The search failed: {}'.format(e))
        print('The search failed: {}'.format(e))
        return -1
    except QfuseError as e:
        logging.error('Cannot continue the search: {}'.format(e))
        print('Cannot continue the search: {}'.format(e))
        return -1

    text = report.search_report(records, best)
    print(text)
    util.atomic_write(conf.paths.output_dir / 'search_report.txt', text)
    print('Trial log: {}'.format(conf.paths.trial_log))
    return 0


def do_eval(conf, model_path, data_prefix=None, metrics_path=None):
    logging.info('Loading the model from: {}...'.format(model_path))
    try:
        model = fusion.load_model(model_path)
    except ModelFormatError as e:
        logging.error('Cannot read the model: {}'.format(e))
        print('Cannot read the model: {}'.format(e))
        return -1
    except OSError as e:
        logging.error('Cannot open the model: {}'.format(e))
        print('Cannot open the model: {}'.format(e))
        return -1

    try:
        dataset = load_prepared(conf, 'test', data_prefix)
    except QfuseError as e:
        logging.error('Cannot read the samples: {}'.format(e))
        print('Cannot read the samples: {}'.format(e))
        return -1
    inputs = [dataset.x_top] if not dataset.is_dual else [dataset.x_top, dataset.x_bottom]
    expected = [net.d_in for net in model.extractors]
    found = [x.shape[1] for x in inputs]
    if expected != found:
        message = 'The model expects inputs of width {} but the samples have width {}'.format(
            '+'.join(map(str, expected)), '+'.join(map(str, found)))
        logging.error(message)
        print(message)
        return -1
    if dataset.n_classes != model.n_classes:
        message = 'The model has {} classes but the samples have {}'.format(model.n_classes, dataset.n_classes)
        logging.error(message)
        print(message)
        return -1

    metrics = fusion.evaluate(model, dataset)
    print('accuracy = {:.6f}'.format(metrics.accuracy))
    print('precision_macro = {:.6f}'.format(metrics.precision_macro))
    print('recall_macro = {:.6f}'.format(metrics.recall_macro))
    print('f1_macro = {:.6f}'.format(metrics.f1_macro))
    if metrics_path is None:
        metrics_path = conf.paths.output_dir / (Path(model_path).stem + '_eval.csv')
    report.write_metrics_csv(metrics_path, [metrics], ['all'])
    print('Metrics: {}'.format(metrics_path))
    return 0


def do_report(path):
    path = Path(path).expanduser()
    if not path.exists():
        print('No such file: {}'.format(path))
        return -1
    try:
        if path.suffix == '.csv':
            rows = report.read_metrics_csv(path)
            print(report.fold_table(rows))
            return 0
        records = aqml.TrialLog(path).read()
    except ValueError as e:
        logging.error('Cannot read {}: {}'.format(path, e))
        print('Cannot read {}: {}'.format(path, e))
        return -1
    best = aqml.best_record(records)
    if best is None:
        print('The trial log has no completed trial.')
        print(report.stability_report(records))
        return 0
    print(report.search_report(records, best))
    return 0


def com_fetch(args):
    conf = initialize_command(args)
    if conf is None:
        sys.exit(-1)
    sys.exit(do_fetch(conf, args.force))


def com_prepare(args):
    conf = initialize_command(args)
    if conf is None:
        sys.exit(-1)
    if args.synthetic is not None and conf.task != config.TASK_PAIRED_CSV:
        print('Synthetic samples can only be generated for the paired_csv task.')
        sys.exit(-1)
    sys.exit(do_prepare(conf, args.synthetic))


def com_train(args):
    conf = initialize_command(args)
    if conf is None:
        sys.exit(-1)
    sys.exit(do_train(conf, args.output, args.metrics))


def com_search(args):
    conf = initialize_command(args)
    if conf is None:
        sys.exit(-1)
    sys.exit(do_search(conf))


def com_eval(args):
    conf = initialize_command(args)
    if conf is None:
        sys.exit(-1)
    if args.model is None:
        print('The model file is not specified.')
        sys.exit(-1)
    sys.exit(do_eval(conf, Path(args.model), args.data, args.metrics))


def com_report(args):
    if args.log is not None:
        start_logging(args.log, args.verbose, args.nowarn)
    if args.file is None:
        print('No trial log or metrics file provided.')
        sys.exit(-1)
    sys.exit(do_report(args.file))


def add_train_overrides(parser):
    parser.add_argument('-s', '--seed', help='master random seed (overrides train.seed)', type=int, metavar='SEED')
    parser.add_argument('-j', '--jobs', help='number of folds trained in parallel', type=int, metavar='N')
    parser.add_argument('-e', '--epochs', help='number of training epochs', type=int, metavar='N')
    parser.add_argument('-k', '--folds', help='number of cross-validation folds', type=int, metavar='K')


def main():
    parser = argparse.ArgumentParser(description='qfuse - Hybrid quantum-classical multisource fusion experiments')
    parser.add_argument('-c', '--config', help='configuration filename',
                        default='qfuse.toml', metavar='CONFIG')
    parser.add_argument('-l', '--log', help='log file filename',
                        metavar='LOG')
    parser.add_argument('-v', '--verbose', help='verbosity of the logging (max stack: 2)',
                        action='count', default=0)
    parser.add_argument('-q', '--nowarn', help='suppress warning message (note that verbosity option overrides this)',
                        action='store_true')

    command_parsers = parser.add_subparsers(help='Specify a subcommand', metavar='COMMAND')

    fetch_parser = command_parsers.add_parser(
        'fetch', help='Download the MNIST IDX files.')
    fetch_parser.add_argument('-f', '--force', help='Download again even if the files exist.',
                              action='store_true')
    fetch_parser.set_defaults(func=com_fetch)

    prepare_parser = command_parsers.add_parser(
        'prepare', help='Build the multisource samples and cache them.')
    prepare_parser.add_argument('-s', '--seed', help='seed of the subsampling (overrides train.seed)',
                                type=int, metavar='SEED')
    prepare_parser.add_argument('--subsample', help='fraction of every class to keep', type=float,
                                metavar='FRACTION')
    prepare_parser.add_argument('--synthetic', help='first write N synthetic change-task pairs to paths.csv_path',
                                type=int, metavar='N')
    prepare_parser.set_defaults(func=com_prepare)

    train_parser = command_parsers.add_parser(
        'train', help='Cross-validate the configured model and save it.')
    add_train_overrides(train_parser)
    train_parser.add_argument('-o', '--output', help='The model file to write.', metavar='MODEL')
    train_parser.add_argument('-m', '--metrics', help='The metrics CSV to write.', metavar='CSV')
    train_parser.set_defaults(func=com_train)

    search_parser = command_parsers.add_parser(
        'search', help='Run (or resume) the architecture and hyperparameter search.')
    add_train_overrides(search_parser)
    search_parser.add_argument('-n', '--trials', help='number of trials', type=int, metavar='N')
    search_parser.add_argument('--no-timing', help='Record zero wall times for reproducible trial logs.',
                               action='store_true')
    search_parser.set_defaults(func=com_search)

    eval_parser = command_parsers.add_parser(
        'eval', help='Evaluate a saved model on prepared samples.')
    eval_parser.add_argument('model', help='The model file.', metavar='MODEL')
    eval_parser.add_argument('-d', '--data', help='Prefix of the prepared samples (default: the test split).',
                             metavar='PREFIX')
    eval_parser.add_argument('-m', '--metrics', help='The metrics CSV to write.', metavar='CSV')
    eval_parser.set_defaults(func=com_eval)

    report_parser = command_parsers.add_parser(
        'report', help='Render a report from a trial log or a metrics CSV.')
    report_parser.add_argument('file', help='A JSONL trial log or a metrics CSV.', metavar='FILE')
    report_parser.set_defaults(func=com_report)

    args = parser.parse_args()

    if not hasattr(args, 'func'):
        print('Bad command is specified or the command is empty.')
        sys.exit(-1)
    args.func(args)


if __name__ == '__main__':
    main()
