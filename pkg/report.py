"""Text and CSV renderings of metrics and trial logs.

Everything here is a pure function of already computed metrics or of a trial
log; nothing retrains.
"""
import csv
import io
from pathlib import Path

import numpy as np

import aqml
import fusion
import util
from errors import IngestionError

METRICS_CSV_COLUMNS = ['fold', 'accuracy', 'precision_macro', 'recall_macro', 'f1_macro']

HEAD_TITLES = {
    fusion.HEAD_MLP: 'MLP',
    fusion.HEAD_SOLO: 'PQC-Solo',
    fusion.HEAD_LINEAR: 'PQC-Linear',
}


def metrics_csv(per_fold_metrics, fold_labels=None):
    if fold_labels is None:
        fold_labels = [str(i + 1) for i in range(len(per_fold_metrics))]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(METRICS_CSV_COLUMNS)
    for label, m in zip(fold_labels, per_fold_metrics):
        writer.writerow([label, repr(m.accuracy), repr(m.precision_macro), repr(m.recall_macro), repr(m.f1_macro)])
    return buf.getvalue()


def write_metrics_csv(path, per_fold_metrics, fold_labels=None):
    util.atomic_write(path, metrics_csv(per_fold_metrics, fold_labels))


def read_metrics_csv(path):
    with open(Path(path).expanduser(), newline='') as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != METRICS_CSV_COLUMNS:
            raise IngestionError('Unexpected metrics CSV columns: {}'.format(reader.fieldnames), path, 1)
        rows = []
        for row in reader:
            rows.append({k: (row[k] if k == 'fold' else float(row[k])) for k in METRICS_CSV_COLUMNS})
        return rows


def param_header(name, extractor_params, classifier_params):
    return '{} (# Parameters. Feature extractors: {}; Classifier: {}, Total: {})'.format(
        name, extractor_params, classifier_params, extractor_params + classifier_params)


def fold_table(rows):
    """One line per metric: a column per fold, then mean ± std.

    rows are dicts with at least 'accuracy' and 'f1_macro'.
    """
    header = ['Metric'] + ['Fold {}'.format(i + 1) for i in range(len(rows))] + ['Mean']
    lines = []
    for key, title in (('accuracy', 'accuracy'), ('f1_macro', 'f1_macro')):
        values = [r[key] for r in rows]
        mean, std = fusion.mean_std(values)
        lines.append([title] + ['{:.3f}'.format(v) for v in values] + [fusion.format_mean_std(mean, std)])
    widths = [max(len(str(row[i])) for row in [header] + lines) for i in range(len(header))]
    out = []
    for row in [header] + lines:
        out.append(' | '.join(str(c).ljust(w) for (c, w) in zip(row, widths)).rstrip())
        if row is header:
            out.append('-+-'.join('-' * w for w in widths))
    return '\n'.join(out)


def model_report(name, extractor_params, classifier_params, rows):
    return param_header(name, extractor_params, classifier_params) + '\n' + fold_table(rows) + '\n'


def record_label(record):
    return record.spec if record.spec else HEAD_TITLES.get(record.head, record.head)


def best_line(record):
    return '{} | params: {} | acc: {:.3f}'.format(record_label(record), record.classifier_params, record.mean_accuracy)


def head_stability(records):
    """max / avg / min of the mean accuracy and f1_macro per head over completed trials."""
    res = {}
    for head in fusion.HEADS:
        group = [r for r in records if r.completed and r.head == head]
        if len(group) == 0:
            continue
        acc = np.array([r.mean_accuracy for r in group])
        f1 = np.array([r.mean_f1_macro for r in group])
        res[head] = {
            'trials': len(group),
            'accuracy_max': float(acc.max()),
            'accuracy_avg': float(acc.mean()),
            'accuracy_min': float(acc.min()),
            'f1_macro_max': float(f1.max()),
            'f1_macro_avg': float(f1.mean()),
            'f1_macro_min': float(f1.min()),
        }
    return res


def _relation(a, b):
    a = round(a, 3)
    b = round(b, 3)
    if a < b:
        return '<'
    if a > b:
        return '>'
    return '='


def stability_report(records):
    stats = head_stability(records)
    if len(stats) == 0:
        return 'No completed trials.\n'
    lines = ['{:<12} {:>6} {:>8} {:>8} {:>8}'.format('head', 'trials', 'max', 'avg', 'min')]
    for head, s in stats.items():
        for metric in ('accuracy', 'f1_macro'):
            lines.append('{:<12} {:>6} {:>8.3f} {:>8.3f} {:>8.3f}  {}'.format(
                HEAD_TITLES[head], s['trials'], s[metric + '_max'], s[metric + '_avg'], s[metric + '_min'], metric))
    if fusion.HEAD_SOLO in stats and fusion.HEAD_LINEAR in stats:
        solo = stats[fusion.HEAD_SOLO]
        linear = stats[fusion.HEAD_LINEAR]
        lines.append('')
        for agg in ('avg', 'min'):
            a = solo['accuracy_' + agg]
            b = linear['accuracy_' + agg]
            lines.append('accuracy^{{{0}}}_{{solo}} = {1:.3f} {2} {3:.3f} = accuracy^{{{0}}}_{{linear}}'
                         .format(agg, a, _relation(a, b), b))
    return '\n'.join(lines) + '\n'


def search_report(records, best):
    failed = sum(1 for r in records if r.status == aqml.STATUS_FAILED)
    pruned = sum(1 for r in records if r.status == aqml.STATUS_PRUNED)
    lines = [
        'Trials: {} (failed: {}, pruned: {})'.format(len(records), failed, pruned),
        '',
        'Best: ' + best_line(best),
        '',
    ]
    rows = [m.serialize() for m in best.per_fold_metrics]
    lines.append(fold_table(rows))
    lines.append('')
    lines.append(stability_report(records))
    return '\n'.join(lines)
