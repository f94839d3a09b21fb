#
# Attack metrics, cost estimates, and report rendering
#
# See LICENSE.txt for license details.
#
import io
import math
import os

import numpy as np
import pandas as pd

from .core import VitrojanObject
from .error import EmptyDatasetError, FileFormatError, UsageError
from .log import getLogger
from .utils import atomic_write, read_json, write_json
from .vit import predict

_logger = getLogger(__name__)

REPORT_COLUMNS = ('cda_before', 'cda_after', 'asr_surd', 'asr_reld', 'ar', 'tpr', 'inject_seconds')
FRACTIONS = ('cda_before', 'cda_after', 'asr_surd', 'asr_reld', 'tpr')

HASH_PREFIX = '# config_hash: '

ATTACK_KINDS = ('badnets', 'trojaning', 'dbia')


class AttackReport(VitrojanObject):
    """
    The outcome of one attack on one model.

    :param name: (str) row label, e.g. the attack or model name
    :param cda_before, cda_after: (float) clean accuracy of the clean and attacked models
    :param asr_surd: (float) attack success on held-out poisoned surrogate images
    :param asr_reld: (float) attack success on triggered main-task test images
    :param ar: (float) attention rate of the final trigger, or ``inf``
    :param tpr: (float) tuned-parameter rate
    :param inject_seconds: (float) wall-clock injection time
    :param config_hash: (str or None) hash of the producing experiment config
    :param details: (dict) further values stored only in the JSON form
    """
    def __init__(self, name, cda_before, cda_after, asr_surd, asr_reld, ar, tpr, inject_seconds,
                 config_hash=None, details=None):
        self.name = name
        self.cda_before = float(cda_before)
        self.cda_after = float(cda_after)
        self.asr_surd = float(asr_surd)
        self.asr_reld = float(asr_reld)
        self.ar = float(ar)
        self.tpr = float(tpr)
        self.inject_seconds = float(inject_seconds)
        self.config_hash = config_hash
        self.details = dict(details or {})

        for col in FRACTIONS:
            value = getattr(self, col)
            if not 0.0 <= value <= 1.0:
                raise UsageError(f"AttackReport '{name}': {col} = {value} is not a fraction")

        if not self.ar >= 0.0:
            raise UsageError(f"AttackReport '{name}': ar = {self.ar} must be >= 0 or inf")

    def __str__(self):
        return f"<AttackReport '{self.name}' ASR-SurD={self.asr_surd:.4f} ASR-RelD={self.asr_reld:.4f}>"

    def values(self):
        return tuple(getattr(self, col) for col in REPORT_COLUMNS)

    def __eq__(self, other):
        return isinstance(other, AttackReport) and self.name == other.name and self.values() == other.values()

    __hash__ = object.__hash__

    @property
    def cda_drop(self):
        return self.cda_before - self.cda_after

    def to_dict(self):
        d = {col: _json_float(getattr(self, col)) for col in REPORT_COLUMNS}
        d.update(name=self.name, config_hash=self.config_hash, details=self.details)
        return d

    @classmethod
    def from_dict(cls, d):
        values = {col: float(d[col]) for col in REPORT_COLUMNS}
        return cls(d['name'], config_hash=d.get('config_hash'), details=d.get('details'), **values)


def _json_float(value):
    # JSON has no infinity; the sentinel is stored as a string
    return 'inf' if math.isinf(value) else value


def cda(model, dataset):
    """
    Fraction of ``dataset`` that ``model`` classifies correctly (argmax).
    """
    if len(dataset) == 0:
        raise EmptyDatasetError(f"Cannot compute CDA on empty dataset '{dataset.name}'")

    predicted = predict(model, dataset.images).argmax(axis=1)
    return float(np.mean(predicted == dataset.labels))


def asr(model, poisoned, target_label, exclude_true_target=False):
    """
    Fraction of ``poisoned`` classified as ``target_label``.

    :param exclude_true_target: (bool) drop samples whose label already is
        ``target_label`` before counting
    :raises EmptyDatasetError: if no samples remain
    """
    images = poisoned.images
    if exclude_true_target:
        images = images[poisoned.labels != target_label]

    if len(images) == 0:
        raise EmptyDatasetError(f"No samples left to compute ASR on '{poisoned.name}'")

    predicted = predict(model, images).argmax(axis=1)
    return float(np.mean(predicted == target_label))


class CostEstimate(VitrojanObject):
    """
    Computational cost of an attack: scalars tuned and images reverse-engineered.
    """
    def __init__(self, kind, tuned_params, total_params, images_reversed, labels):
        if tuned_params > total_params:
            raise UsageError(f"CostEstimate: tuned {tuned_params} exceeds total {total_params}")

        self.kind = kind
        self.tuned_params = int(tuned_params)
        self.total_params = int(total_params)
        self.images_reversed = int(images_reversed)
        self.labels = int(labels)

    @property
    def alpha(self):
        return self.tuned_params / self.total_params

    def to_dict(self):
        return dict(kind=self.kind, tuned_params=self.tuned_params, total_params=self.total_params,
                    alpha=self.alpha, images_reversed=self.images_reversed, labels=self.labels)


def cost_estimate(kind, model, config=None):
    """
    Estimate the cost of an attack on ``model``.

    - badnets: all parameters, no reversed images
    - trojaning: all parameters, one reversed image per label plus the trigger
    - dbia: the selected neurons' parameters, one generated trigger

    :param kind: (str) one of 'badnets', 'trojaning', 'dbia'
    :param model: (Checkpoint) the attacked model
    :param config: for 'dbia', a NeuronSelection or an InjectConfig to select with
    :return: (CostEstimate)
    """
    total = model.parameter_count()
    labels = model.spec.num_classes

    if kind == 'badnets':
        return CostEstimate(kind, total, total, 0, labels)

    if kind == 'trojaning':
        return CostEstimate(kind, total, total, labels + 1, labels)

    if kind == 'dbia':
        from .injection import InjectConfig, NeuronSelection, select_top_n

        selection = config
        if config is None or isinstance(config, InjectConfig):
            cfg = config or InjectConfig()
            block = model.spec.num_blocks - 1 if cfg.block is None else cfg.block
            selection = select_top_n(model, block, n=cfg.n, include_attn_proj=cfg.include_attn_proj,
                                     tpr_cap=cfg.tpr_cap)
        elif not isinstance(config, NeuronSelection):
            raise UsageError(f"cost_estimate: unsupported config {config!r}")

        return CostEstimate(kind, selection.tuned_count, total, 1, labels)

    raise UsageError(f"Unknown attack kind '{kind}'; must be one of {ATTACK_KINDS}")


def render_costs(estimates):
    df = pd.DataFrame([e.to_dict() for e in estimates]).set_index('kind')
    return df.to_string(float_format=lambda v: f'{v:.6f}') + '\n'


#
# Reports
#
def report_frame(reports):
    rows = [dict(model=r.name, **dict(zip(REPORT_COLUMNS, r.values()))) for r in reports]
    df = pd.DataFrame(rows, columns=('model',) + REPORT_COLUMNS)
    return df.set_index('model')


def render_report(reports, fmt='text', config_hash=None):
    """
    Render reports as an aligned text table or CSV, one row per report in
    input order. Values are written with enough digits to be read back exactly.

    :param reports: (list of AttackReport)
    :param fmt: (str) 'text' or 'csv'
    :param config_hash: (str or None) written as a leading comment line
    :return: (str) the document
    """
    df = report_frame(reports)
    header = f"{HASH_PREFIX}{config_hash}\n" if config_hash else ''

    if fmt == 'csv':
        return header + df.to_csv(float_format='%.17g')

    if fmt != 'text':
        raise UsageError(f"Unknown report format '{fmt}'; use 'text' or 'csv'")

    if df.empty:
        body = '  '.join(('model',) + REPORT_COLUMNS) + '\n'
    else:
        body = df.to_string(float_format=lambda v: repr(float(v))) + '\n'

    return header + body


def read_report_csv(source):
    """
    Parse a CSV document written by :py:func:`render_report`.

    :param source: (str) a pathname or the CSV text itself
    :return: (tuple) (list of AttackReport, config hash or None)
    """
    if '\n' in source:
        text = source
    else:
        with open(source) as f:
            text = f.read()

    first = text.split('\n', 1)[0]
    config_hash = first[len(HASH_PREFIX):].strip() if first.startswith(HASH_PREFIX) else None

    try:
        df = pd.read_csv(io.StringIO(text), comment='#', index_col='model', dtype={'model': str},
                         float_precision='round_trip')
    except (ValueError, pd.errors.ParserError) as e:
        raise FileFormatError(f"Cannot parse report CSV: {e}")

    missing = set(REPORT_COLUMNS) - set(df.columns)
    if missing:
        raise FileFormatError(f"Report CSV lacks columns {sorted(missing)}")

    reports = [AttackReport(name, config_hash=config_hash, **{col: row[col] for col in REPORT_COLUMNS})
               for name, row in df.iterrows()]
    return reports, config_hash


def save_reports(path, reports, extra=None):
    doc = dict(reports=[r.to_dict() for r in reports])
    doc.update(extra or {})
    write_json(path, doc)


def load_reports(path):
    doc = read_json(path)
    try:
        return [AttackReport.from_dict(d) for d in doc['reports']]
    except KeyError as e:
        raise FileFormatError(f"{path}: report is missing item {e}")


def write_report_files(directory, reports, config_hash):
    """
    Write ``report.json``, ``report.csv`` and ``report.txt`` to ``directory``.
    """
    save_reports(os.path.join(directory, 'report.json'), reports, extra=dict(config_hash=config_hash))
    for fmt, name in (('csv', 'report.csv'), ('text', 'report.txt')):
        with atomic_write(os.path.join(directory, name), 'w') as f:
            f.write(render_report(reports, fmt=fmt, config_hash=config_hash))
