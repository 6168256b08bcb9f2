import csv
import gzip
import io
import json
import logging
import struct
from pathlib import Path

import numpy as np
from chardet.universaldetector import UniversalDetector

import util
from errors import DataFormatError, IngestionError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IDX_UBYTE = 0x08

MNIST_SIDE = 28
HALF_ROWS = 14
MULTISOURCE_WIDTH = 14

CSV_LABEL_COLUMN = 'label'


class SampleSet:
    def __init__(self, x_top, labels, x_bottom=None, class_map=None, source_widths=None):
        self.x_top = np.asarray(x_top, dtype=np.float64)
        self.x_bottom = None if x_bottom is None else np.asarray(x_bottom, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if class_map is None:
            class_map = {int(c): int(c) for c in np.unique(self.labels)}
        self.class_map = dict(class_map)
        # widths of the sources concatenated into x_top (single-extractor mode)
        self.source_widths = tuple(source_widths) if source_widths else (self.x_top.shape[1],)
        if self.x_top.ndim != 2 or self.labels.ndim != 1 or self.x_top.shape[0] != self.labels.shape[0]:
            raise ValidationError('Row counts disagree: x_top {} vs labels {}'
                                  .format(self.x_top.shape, self.labels.shape))
        if self.x_bottom is not None and (self.x_bottom.ndim != 2 or self.x_bottom.shape[0] != len(self)):
            raise ValidationError('Row counts disagree: x_bottom {} vs labels {}'
                                  .format(self.x_bottom.shape, self.labels.shape))
        if len(self) > 0 and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValidationError('Labels must lie in [0, {})'.format(self.n_classes))

    def __len__(self):
        return self.labels.shape[0]

    @property
    def n_classes(self):
        return len(self.class_map)

    @property
    def is_dual(self):
        return self.x_bottom is not None

    @property
    def targets(self):
        return np.eye(self.n_classes)[self.labels]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return SampleSet(
            self.x_top[indices],
            self.labels[indices],
            None if self.x_bottom is None else self.x_bottom[indices],
            self.class_map,
            self.source_widths,
        )

    def concatenated(self):
        """The same samples with x_bottom appended to x_top, for a single extractor."""
        if not self.is_dual:
            return self
        return SampleSet(np.hstack([self.x_top, self.x_bottom]), self.labels, None, self.class_map,
                         (self.x_top.shape[1], self.x_bottom.shape[1]))


class RawDigits:
    def __init__(self, images, labels, class_map=None):
        self.images = images
        self.labels = labels
        self.class_map = class_map


# --- IDX -------------------------------------------------------------------

def _open_maybe_gzip(path):
    path = Path(path).expanduser()
    if not path.exists():
        raise IngestionError('No such file', path)
    with open(path, 'rb') as f:
        data = f.read()
    if data[:2] == b'\x1f\x8b':
        data = gzip.decompress(data)
    return data


def read_idx(path, expected_magic):
    data = _open_maybe_gzip(path)
    if len(data) < 4:
        raise IngestionError('Truncated IDX header', path)
    magic = struct.unpack('>I', data[:4])[0]
    if magic != expected_magic:
        raise IngestionError('Bad magic number 0x{:08x} (expected 0x{:08x})'.format(magic, expected_magic), path)
    ndim = magic & 0xff
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IngestionError('Truncated IDX header', path)
    dims = struct.unpack('>' + 'I' * ndim, data[4:header])
    count = int(np.prod(dims))
    if len(data) - header != count:
        raise IngestionError('Expected {} data bytes for dims {}, found {}'.format(count, dims, len(data) - header),
                             path)
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = (IDX_UBYTE << 8) | array.ndim
    content = struct.pack('>I', magic) + struct.pack('>' + 'I' * array.ndim, *array.shape) + array.tobytes()
    util.atomic_write(path, content, binary=True)


def load_mnist_idx(images_path, labels_path):
    logging.info('Reading MNIST images from: {}...'.format(images_path))
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IngestionError('{} images but {} labels'.format(images.shape[0], labels.shape[0]), labels_path)
    return RawDigits(images, labels)


def filter_classes(raw, keep=(5, 6, 7)):
    keep = sorted(set(int(k) for k in keep))
    if len(keep) == 0:
        raise ValidationError('The set of classes to keep is empty')
    class_map = {orig: i for (i, orig) in enumerate(keep)}
    mask = np.isin(raw.labels, keep)
    labels = np.array([class_map[int(l)] for l in raw.labels[mask]], dtype=np.int64)
    logging.info('Kept {} of {} samples for classes {}'.format(int(mask.sum()), raw.labels.shape[0], keep))
    return RawDigits(raw.images[mask], labels, class_map)


# --- synthetic multisource inputs ------------------------------------------

def make_multisource(image, threshold=0.5, pooling='mean'):
    """Split a 28x28 digit into top / bottom source vectors of 14 values each.

    Takes a single image or a stack of images (N x 28 x 28).
    """
    image = np.asarray(image)
    if image.shape[-2:] != (MNIST_SIDE, MNIST_SIDE) or image.ndim not in (2, 3):
        raise ValidationError('Expected 28x28 images, got shape {}'.format(image.shape))
    binary = (image.astype(np.float64) / 255.0 > threshold).astype(np.float64)
    sources = []
    for half in (binary[..., :HALF_ROWS, :], binary[..., HALF_ROWS:, :]):
        blocks = half.reshape(half.shape[:-2] + (HALF_ROWS // 2, 2, MNIST_SIDE // 2, 2))
        if pooling == 'mean':
            pooled = blocks.mean(axis=(-3, -1))
        elif pooling == 'max':
            pooled = blocks.max(axis=(-3, -1))
        else:
            raise ValidationError('Unknown pooling operator: {}'.format(pooling))
        sources.append(pooled.mean(axis=-2))
    return sources[0], sources[1]


def multisource_sample_set(raw, threshold=0.5, pooling='mean'):
    x_top, x_bottom = make_multisource(raw.images, threshold, pooling)
    return SampleSet(x_top, raw.labels, x_bottom, raw.class_map)


def one_hot(label, n_classes):
    if not 0 <= label < n_classes:
        raise ValidationError('Label {} is out of range for {} classes'.format(label, n_classes))
    res = np.zeros(n_classes)
    res[label] = 1
    return res


def subsample(sample_set, fraction, seed):
    """Seeded per-class subsample keeping the original order within each class."""
    if not 0 < fraction <= 1:
        raise ValidationError('The subsample fraction must be in (0, 1], got {}'.format(fraction))
    if fraction == 1:
        return sample_set
    rng = np.random.default_rng(seed)
    chosen = []
    for c in range(sample_set.n_classes):
        idx = np.flatnonzero(sample_set.labels == c)
        n = max(1, int(round(len(idx) * fraction))) if len(idx) > 0 else 0
        chosen.append(np.sort(rng.choice(idx, size=n, replace=False)))
    return sample_set.subset(np.sort(np.concatenate(chosen)))


# --- PCA -------------------------------------------------------------------

class PcaModel:
    def __init__(self, mean, components, explained_variance, explained_variance_ratio):
        self.mean = mean
        self.components = components
        self.explained_variance = explained_variance
        self.explained_variance_ratio = explained_variance_ratio

    def serialize(self):
        return {
            'mean': self.mean.tolist(),
            'components': self.components.tolist(),
            'explained_variance': self.explained_variance.tolist(),
            'explained_variance_ratio': self.explained_variance_ratio.tolist(),
        }

    @staticmethod
    def deserialize(serialized):
        return PcaModel(
            np.array(serialized['mean']),
            np.array(serialized['components']),
            np.array(serialized['explained_variance']),
            np.array(serialized['explained_variance_ratio']),
        )


def pca_fit(data, k):
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValidationError('PCA expects an N x d matrix, got shape {}'.format(data.shape))
    n, d = data.shape
    if not 1 <= k <= d:
        raise ValidationError('Cannot keep {} components of {}-dimensional data'.format(k, d))
    if n < 2:
        raise ValidationError('PCA needs at least two samples, got {}'.format(n))
    mean = data.mean(axis=0)
    cov = np.cov(data - mean, rowvar=False).reshape(d, d)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = np.clip(eigenvalues[order], 0.0, None)
    components = eigenvectors[:, order].T[:k]
    # largest-magnitude entry of every direction is positive
    pivots = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(k), pivots])
    components = components * signs[:, None]
    total = eigenvalues.sum()
    ratio = eigenvalues[:k] / total if total > 0 else np.zeros(k)
    return PcaModel(mean, components, eigenvalues[:k], ratio)


def pca_transform(model, x):
    return (np.asarray(x, dtype=np.float64) - model.mean) @ model.components.T


def pca_inverse_transform(model, z):
    return np.asarray(z, dtype=np.float64) @ model.components + model.mean


def reduce_sources(sample_set, k):
    """Fit one PCA per concatenated source and rebuild x_top from the reduced sources."""
    models = []
    parts = []
    start = 0
    for width in sample_set.source_widths:
        block = sample_set.x_top[:, start:start + width]
        model = pca_fit(block, k)
        models.append(model)
        parts.append(pca_transform(model, block))
        start += width
    reduced = SampleSet(np.hstack(parts), sample_set.labels, None, sample_set.class_map,
                        tuple(k for _ in sample_set.source_widths))
    return reduced, models


# --- paired-source CSV -----------------------------------------------------

def _decode(data, path):
    guesser = UniversalDetector()
    guesser.feed(data)
    guess = guesser.close()
    encoding = guess['encoding'] if guesser.done and guess['encoding'] is not None else 'utf-8'
    try:
        return data.decode(encoding)
    except (UnicodeError, LookupError):
        raise IngestionError('Could not decode the file as {}'.format(encoding), path)


def _paired_header(d):
    return ['src0_{}'.format(i) for i in range(d)] + ['src1_{}'.format(i) for i in range(d)] + [CSV_LABEL_COLUMN]


def load_paired_csv(path):
    path = Path(path).expanduser()
    if not path.exists():
        raise IngestionError('No such file', path)
    with open(path, 'rb') as f:
        text = _decode(f.read(), path)
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise IngestionError('Empty file', path, 1)
    if len(header) < 3 or (len(header) - 1) % 2 != 0:
        raise IngestionError('Header must list src0_*, src1_* and label columns', path, 1)
    d = (len(header) - 1) // 2
    if header != _paired_header(d):
        raise IngestionError('Unexpected header: {}'.format(','.join(header)), path, 1)
    rows = []
    labels = []
    for line_no, row in enumerate(reader, start=2):
        if len(row) == 0:
            continue
        if len(row) != len(header):
            raise IngestionError('Expected {} cells, found {}'.format(len(header), len(row)), path, line_no)
        try:
            values = [float(c) for c in row[:-1]]
        except ValueError:
            raise IngestionError('Non-numeric cell', path, line_no)
        if not np.all(np.isfinite(values)):
            raise DataFormatError('Non-finite cell', path, line_no)
        label = row[-1].strip()
        if label not in ('0', '1'):
            raise IngestionError('Label must be 0 or 1, got "{}"'.format(label), path, line_no)
        rows.append(values)
        labels.append(int(label))
    if len(rows) == 0:
        raise IngestionError('No data rows', path)
    logging.info('Read {} paired samples with {} features per source from: {}'.format(len(rows), d, path))
    return SampleSet(np.array(rows), np.array(labels), None, {0: 0, 1: 1}, (d, d))


def write_paired_csv(path, x_src0, x_src1, labels):
    x_src0 = np.asarray(x_src0, dtype=np.float64)
    x_src1 = np.asarray(x_src1, dtype=np.float64)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(_paired_header(x_src0.shape[1]))
    for a, b, label in zip(x_src0, x_src1, labels):
        writer.writerow([repr(float(v)) for v in a] + [repr(float(v)) for v in b] + [int(label)])
    util.atomic_write(path, buf.getvalue())


def make_synthetic_change_task(n_samples, bands=13, seed=42, shift=3.0):
    """Paired pixels where 'change' adds a fixed spectral offset to the second source."""
    rng = np.random.default_rng(seed)
    before = rng.normal(0.0, 1.0, size=(n_samples, bands))
    labels = rng.integers(0, 2, size=n_samples)
    direction = rng.normal(0.0, 1.0, size=bands)
    direction /= np.linalg.norm(direction)
    after = before + rng.normal(0.0, 0.1, size=(n_samples, bands)) + shift * labels[:, None] * direction
    return before, after, labels


# --- prepared sample cache -------------------------------------------------

def _prepared_paths(prefix):
    prefix = Path(prefix).expanduser()
    return prefix.with_suffix('.csv'), prefix.with_suffix('.json')


def write_prepared(sample_set, prefix, provenance, pipeline):
    csv_path, sidecar_path = _prepared_paths(prefix)
    header = ['top_{}'.format(i) for i in range(sample_set.x_top.shape[1])]
    if sample_set.is_dual:
        header += ['bottom_{}'.format(i) for i in range(sample_set.x_bottom.shape[1])]
    header.append(CSV_LABEL_COLUMN)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator='\n')
    writer.writerow(header)
    for i in range(len(sample_set)):
        row = [repr(float(v)) for v in sample_set.x_top[i]]
        if sample_set.is_dual:
            row += [repr(float(v)) for v in sample_set.x_bottom[i]]
        row.append(int(sample_set.labels[i]))
        writer.writerow(row)
    util.atomic_write(csv_path, buf.getvalue())
    sidecar = {
        'rows': len(sample_set),
        'top_width': int(sample_set.x_top.shape[1]),
        'bottom_width': int(sample_set.x_bottom.shape[1]) if sample_set.is_dual else None,
        'source_widths': list(sample_set.source_widths),
        'class_map': {str(k): v for (k, v) in sample_set.class_map.items()},
        'provenance': provenance,
        'pipeline': pipeline,
        'pipeline_hash': util.stable_hash(pipeline),
    }
    util.atomic_write(sidecar_path, json.dumps(sidecar, indent=2, sort_keys=True) + '\n')


def read_prepared_sidecar(prefix):
    _, sidecar_path = _prepared_paths(prefix)
    if not sidecar_path.exists():
        return None
    with open(sidecar_path) as f:
        return json.load(f)


def read_prepared(prefix):
    csv_path, sidecar_path = _prepared_paths(prefix)
    sidecar = read_prepared_sidecar(prefix)
    if sidecar is None or not csv_path.exists():
        raise IngestionError('Prepared data not found (run the prepare command first)', csv_path)
    top_width = sidecar['top_width']
    bottom_width = sidecar['bottom_width'] or 0
    with open(csv_path, newline='') as f:
        reader = csv.reader(f)
        next(reader)
        rows = []
        labels = []
        for line_no, row in enumerate(reader, start=2):
            if len(row) != top_width + bottom_width + 1:
                raise IngestionError('Expected {} cells, found {}'.format(top_width + bottom_width + 1, len(row)),
                                     csv_path, line_no)
            try:
                rows.append([float(c) for c in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError:
                raise IngestionError('Non-numeric cell', csv_path, line_no)
    values = np.array(rows).reshape(len(rows), top_width + bottom_width)
    class_map = {int(k): v for (k, v) in sidecar['class_map'].items()}
    return SampleSet(
        values[:, :top_width],
        np.array(labels, dtype=np.int64),
        values[:, top_width:] if bottom_width else None,
        class_map,
        sidecar['source_widths'],
    )
