import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path


def atomic_write(path, content, binary=False):
    """Write content to path through a temporary file in the same directory"""
    path = Path(path).expanduser()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix='.' + path.name + '.', dir=str(path.parent))
    try:
        with os.fdopen(fd, 'wb' if binary else 'w') as f:
            f.write(content)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logging.debug('Wrote the file: {}'.format(path))


def stable_hash(obj):
    ser = json.dumps(obj, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(ser.encode('utf-8')).hexdigest()


def file_digest(path):
    h = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()
