"""Run manifest and deterministic artifact serialization.

Numeric artifacts are CSV with 17-significant-digit decimal floats (the
shortest exact round trip for binary64) and JSON reports serialized with
sorted keys, so an identical configuration reproduces every file byte
for byte.  All writes go through a temp file + rename in the target
directory, so readers never observe partial files; the manifest itself
is written the same way at run end, even when a stage failed.
"""

import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import scipy

__all__ = ['write_text_atomic', 'write_csv', 'write_json', 'sha256_file',
           'RunManifest']

FLOAT_FMT = '%.17g'


def write_text_atomic(path, text):
    '''Write text via tmp file + os.replace in the same directory.'''
    path = os.fspath(path)
    tmp = path + '.tmp'
    with open(tmp, 'w', encoding='utf-8', newline='\n') as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, header, columns):
    """CSV artifact: comma header line, then FLOAT_FMT rows.

    columns is a sequence of equal-length 1D arrays (ints are written
    as integers, floats at 17 significant digits).
    """
    cols = [np.asarray(c) for c in columns]
    n = len(cols[0])
    fmts = ['%d' if np.issubdtype(c.dtype, np.integer) else FLOAT_FMT
            for c in cols]
    buf = io.StringIO()
    buf.write(','.join(header) + '\n')
    for i in range(n):
        buf.write(','.join(f % c[i] for f, c in zip(fmts, cols)) + '\n')
    write_text_atomic(path, buf.getvalue())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def write_json(path, obj):
    '''JSON artifact with sorted keys and a trailing newline.'''
    text = json.dumps(_jsonable(obj), indent=2, sort_keys=True,
                      allow_nan=True) + '\n'
    write_text_atomic(path, text)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, 'rb') as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b''):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Reproducible record of one run.

    stages maps stage name to {'status': ok|failed|infeasible|blocked|
    skipped, 'error': ...}; artifacts maps artifact name to its path
    (relative to the output directory) and content hash; scalars holds
    the headline numbers.  Wall-clock timings are deliberately kept out
    (they vary between identical reruns) and go to a separate
    timings.json that the manifest does not reference.
    """
    config: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    @classmethod
    def begin(cls, config_echo, package_version):
        versions = {
            'python': '%d.%d.%d' % sys.version_info[:3],
            'numpy': np.__version__,
            'scipy': scipy.__version__,
            'glcurrent': package_version,
        }
        return cls(config=config_echo, versions=versions)

    def add_artifact(self, out_dir, rel_path):
        '''Hash a just-written file and record it under its rel path.'''
        self.artifacts[rel_path] = {
            'path': rel_path,
            'sha256': sha256_file(os.path.join(out_dir, rel_path)),
        }

    def write(self, out_dir, name='run_manifest.json'):
        payload = {
            'config': self.config,
            'versions': self.versions,
            'stages': self.stages,
            'scalars': self.scalars,
            'artifacts': self.artifacts,
        }
        write_json(os.path.join(out_dir, name), payload)
