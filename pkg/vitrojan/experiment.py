#
# Experiment configuration and the attack pipeline stages
#
# See LICENSE.txt for license details.
#
"""
An experiment is described by one JSON document. The packaged
``etc/experiment.json`` supplies every default; a user's file is merged over
it, so it need only name the settings it changes.

Each stage reads its inputs from and writes its outputs to an artifact
directory, so stages can be run separately::

    <out>/data/{main_train,main_test,surrogate}/
    <out>/clean/model.bin
    <out>/trigger/trigger.json
    <out>/backdoor/model.bin, injection_log.json
    <out>/report/report.json, report.csv, report.txt, attention.png

A stage whose outputs already exist is skipped unless ``force`` is set.
"""
import copy
import functools
import hashlib
import json
import os

from .attention import attention_rate, save_heatmap, token_attention
from .core import VitrojanObject
from .datasets import (SurrogatePolicy, SyntheticSpec, conform, export_raw, family_classes,
                       gen_synthetic, import_archive, load_raw, make_surrogate, split)
from .error import ExperimentConfigError, MissingArtifactError, StageError, VitrojanException
from .injection import BadNetsConfig, InjectConfig, InjectionLog, inject, inject_badnets_baseline
from .log import getLogger
from .metrics import (AttackReport, asr, cda, cost_estimate, load_reports, render_costs,
                      render_report, save_reports, write_report_files)
from .pkg_utils import getResource
from .tensor import no_grad
from .trigger import (Placement, TriggerGenConfig, build_poisoned_dataset, generate_trigger,
                      load_trigger, save_preview, save_trigger, stamp, stamp_dataset)
from .utils import atomic_write, canonical_json, mkdirs
from .vit import ModelSpec, TrainConfig, load_checkpoint, save_checkpoint, train_clean

_logger = getLogger(__name__)

DEFAULTS_RESOURCE = 'etc/experiment.json'

# offsets that give each random stream its own seed
TEST_SEED_OFFSET = 1
POOL_SEED_OFFSET = 2
SAMPLE_SEED_OFFSET = 3


def default_config():
    return json.loads(getResource(DEFAULTS_RESOURCE))


def deep_merge(base, override, path=''):
    """
    Return a copy of ``base`` with the values of ``override`` merged in,
    recursively. Keys absent from ``base`` are rejected.
    """
    result = copy.deepcopy(base)
    for key, value in override.items():
        where = f'{path}.{key}' if path else key
        if key not in base:
            raise ExperimentConfigError(f"Unknown experiment setting '{where}'")

        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ExperimentConfigError(f"Experiment setting '{where}' must be an object")
            result[key] = deep_merge(base[key], value, where)
        else:
            result[key] = value

    return result


class ExperimentConfig(VitrojanObject):
    """
    A validated experiment configuration, with accessors that build the
    settings objects each stage needs.
    """
    def __init__(self, data, source=None):
        self.data = data
        self.source = source
        self.validate()

    @classmethod
    def load(cls, path=None, seed=None, overrides=None):
        """
        Read ``path`` (if given) over the packaged defaults.

        :param seed: (int or None) replaces the configured seed
        :param overrides: (dict or None) merged last
        """
        data = default_config()

        if path:
            if not os.path.exists(path):
                raise ExperimentConfigError(f"Experiment config '{path}' does not exist")
            try:
                with open(path) as f:
                    user = json.load(f)
            except json.JSONDecodeError as e:
                raise ExperimentConfigError(f"Experiment config '{path}' is not valid JSON: {e}")

            if not isinstance(user, dict):
                raise ExperimentConfigError(f"Experiment config '{path}' must hold a JSON object")
            data = deep_merge(data, user)

        if overrides:
            data = deep_merge(data, overrides)

        if seed is not None:
            data['seed'] = int(seed)

        return cls(data, source=path)

    def __str__(self):
        return f"<ExperimentConfig '{self.source or 'defaults'}' hash={self.config_hash()[:12]}>"

    @property
    def seed(self):
        return self.data['seed']

    @property
    def target_label(self):
        return self.data['target_label']

    @property
    def timing(self):
        return bool(self.data['timing'])

    @property
    def name(self):
        return self.data['name']

    def config_hash(self):
        """
        SHA-256 of the canonical JSON form of the merged configuration.
        """
        return hashlib.sha256(canonical_json(self.data).encode('utf-8')).hexdigest()

    def model_spec(self):
        return ModelSpec.from_dict(self.data['model'])

    def train_config(self):
        return TrainConfig(seed=self.seed, **self.data['train'])

    def _synthetic_spec(self, section):
        d = self.data[section]
        model = self.data['model']
        return SyntheticSpec(family=d['family'], image_size=model['image_size'], channels=model['channels'],
                             noise=d['noise'], min_scale=d['min_scale'], max_scale=d['max_scale'])

    def main_spec(self):
        return self._synthetic_spec('main_data')

    def surrogate_spec(self):
        return self._synthetic_spec('surrogate')

    def main_classes(self):
        return family_classes(self.data['main_data']['family'])

    def surrogate_policy(self):
        d = self.data['surrogate']
        source = os.path.splitext(os.path.basename(d['archive']))[0] if d['archive'] else d['family']
        return SurrogatePolicy(source_name=source, count=d['count'], require_disjoint=d['require_disjoint'],
                               seed=self.seed + SAMPLE_SEED_OFFSET)

    def placement(self):
        d = self.data['trigger']
        return Placement(corner=d['corner'], size=d['size'], offset=d['offset'])

    def trigger_config(self):
        d = {k: v for k, v in self.data['trigger'].items() if k not in ('corner', 'size', 'offset')}
        return TriggerGenConfig(seed=self.seed, **d)

    def inject_config(self):
        d = {k: v for k, v in self.data['inject'].items() if k != 'monitor_fraction'}
        return InjectConfig(seed=self.seed, **d)

    @property
    def monitor_fraction(self):
        return self.data['inject']['monitor_fraction']

    def baseline_config(self):
        return BadNetsConfig(seed=self.seed, **self.data['baseline'])

    def validate(self):
        src = f" '{self.source}'" if self.source else ''
        try:
            spec = self.model_spec()
            self.train_config()
            self.main_spec()
            self.surrogate_spec()
            self.surrogate_policy()
            self.placement().mask(spec.image_size)
            self.trigger_config()
            self.inject_config()
            self.baseline_config()
            main_classes = self.main_classes()
            surrogate_classes = family_classes(self.data['surrogate']['family'])

        except ExperimentConfigError:
            raise

        except (VitrojanException, TypeError, ValueError) as e:
            raise ExperimentConfigError(f"Invalid experiment config{src}: {e}")

        if len(main_classes) != spec.num_classes:
            raise ExperimentConfigError(f"Main family '{self.data['main_data']['family']}' has {len(main_classes)} "
                                        f"classes but the model has {spec.num_classes}")

        if not 0 <= self.target_label < spec.num_classes:
            raise ExperimentConfigError(f"target_label {self.target_label} is not a class of the model")

        surrogate = self.data['surrogate']
        if surrogate['require_disjoint'] and not surrogate['archive'] and set(main_classes) & set(surrogate_classes):
            raise ExperimentConfigError("Main and surrogate families share classes but disjointness is required")

        for section, key in (('main_data', 'train_size'), ('main_data', 'test_size'), ('surrogate', 'pool_size')):
            if self.data[section][key] <= 0:
                raise ExperimentConfigError(f"{section}.{key} must be positive")

        if not 0 <= self.monitor_fraction < 1:
            raise ExperimentConfigError(f"inject.monitor_fraction must lie in [0, 1), got {self.monitor_fraction}")

        if self.data['evaluate']['attention_samples'] <= 0:
            raise ExperimentConfigError("evaluate.attention_samples must be positive")


class ArtifactLayout(object):
    """
    Pathnames of the artifacts under an output directory.
    """
    def __init__(self, root):
        self.root = root

    def data_dir(self, name):
        return os.path.join(self.root, 'data', name)

    @property
    def clean_model(self):
        return os.path.join(self.root, 'clean', 'model.bin')

    @property
    def trigger_dir(self):
        return os.path.join(self.root, 'trigger')

    @property
    def backdoor_model(self):
        return os.path.join(self.root, 'backdoor', 'model.bin')

    @property
    def injection_log(self):
        return os.path.join(self.root, 'backdoor', 'injection_log.json')

    @property
    def report_dir(self):
        return os.path.join(self.root, 'report')

    @property
    def baseline_dir(self):
        return os.path.join(self.root, 'baseline')


def stage(name):
    """
    Decorator that tags errors raised inside a stage with the stage name.
    """
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except StageError:
                raise
            except VitrojanException as e:
                raise StageError(name, e)

        wrapper.stage_name = name
        return wrapper

    return decorator


def _done(name, outputs, force):
    if force:
        return False

    if all(os.path.exists(path) for path in outputs):
        _logger.warning(f"{name}: outputs exist in {os.path.dirname(outputs[0])}; skipping (use --force to recompute)")
        return True

    return False


def _require(path, producer):
    if not os.path.exists(path):
        raise MissingArtifactError(f"'{path}' does not exist; run '{producer}' first")


def _load_dataset(layout, name, cfg):
    meta = os.path.join(layout.data_dir(name), 'meta.json')
    _require(meta, 'train-clean')
    return conform(load_raw(layout.data_dir(name)), cfg.data['model']['image_size'])


#
# Stages
#
@stage('data')
def data_stage(cfg, out, force=False):
    """
    Generate the main-task train/test sets and the surrogate set, or read
    them from ``out`` when they already exist.

    :return: (dict) the datasets keyed 'main_train', 'main_test' and 'surrogate'
    """
    layout = ArtifactLayout(out)
    extra = dict(config_hash=cfg.config_hash())
    main = cfg.data['main_data']

    def make_surrogate_set():
        d = cfg.data['surrogate']
        if d['archive']:
            pool = import_archive(d['archive'], channels=cfg.data['model']['channels'], split='pool')
        else:
            pool = gen_synthetic(cfg.surrogate_spec(), d['pool_size'], cfg.seed + POOL_SEED_OFFSET,
                                 split='pool', name=d['family'])
        return make_surrogate(pool, cfg.surrogate_policy(), cfg.main_classes())

    producers = {
        'main_train': lambda: gen_synthetic(cfg.main_spec(), main['train_size'], cfg.seed,
                                            split='train', name='main_train'),
        'main_test': lambda: gen_synthetic(cfg.main_spec(), main['test_size'], cfg.seed + TEST_SEED_OFFSET,
                                           split='test', name='main_test'),
        'surrogate': make_surrogate_set,
    }

    datasets = {}
    for name, produce in producers.items():
        path = layout.data_dir(name)
        if _done('data', [os.path.join(path, 'meta.json')], force):
            datasets[name] = _load_dataset(layout, name, cfg)
        else:
            dataset = produce()
            export_raw(dataset, path, extra=extra)
            datasets[name] = conform(dataset, cfg.data['model']['image_size'])

    return datasets


@stage('train-clean')
def train_clean_stage(cfg, out, force=False, train=None):
    """
    Train the clean model. ``train`` is the main-task training set; when it
    is not given the data stage supplies it.
    """
    layout = ArtifactLayout(out)
    if _done('train-clean', [layout.clean_model], force):
        return layout.clean_model

    if train is None:
        train = data_stage(cfg, out, force=force)['main_train']

    model = train_clean(cfg.model_spec(), train, cfg.train_config())
    save_checkpoint(model, layout.clean_model, extra=dict(config_hash=cfg.config_hash()))
    _logger.info(f"Wrote {layout.clean_model}")
    return layout.clean_model


@stage('gen-trigger')
def gen_trigger_stage(cfg, out, force=False):
    layout = ArtifactLayout(out)
    trigger_json = os.path.join(layout.trigger_dir, 'trigger.json')
    preview = os.path.join(layout.trigger_dir, 'trigger.png')
    if _done('gen-trigger', [trigger_json, preview], force):
        return layout.trigger_dir

    _require(layout.clean_model, 'train-clean')
    model = load_checkpoint(layout.clean_model, spec=cfg.model_spec())
    surrogate = _load_dataset(layout, 'surrogate', cfg)

    trig, history = generate_trigger(model, surrogate, cfg.trigger_config(), cfg.placement())
    save_trigger(trig, layout.trigger_dir, history=history, extra=dict(config_hash=cfg.config_hash()))
    save_preview(trig, preview)
    _logger.info(f"Wrote trigger to {layout.trigger_dir}")
    return layout.trigger_dir


class SurrogateSplits(VitrojanObject):
    """
    The surrogate set divided for injection: ``tuning`` images are stamped
    into ``poisoned``; ``heldout`` images, stamped, form ``monitor``. The
    unstamped parts are kept for the clean-output term and for measuring
    attention.
    """
    def __init__(self, tuning, heldout, poisoned, monitor):
        self.tuning = tuning
        self.heldout = heldout
        self.poisoned = poisoned
        self.monitor = monitor


def surrogate_splits(cfg, surrogate, trig):
    """
    Split ``surrogate`` into a tuning part and a held-out part holding
    ``inject.monitor_fraction`` of it, and stamp both. With a fraction of 0
    the whole set serves both purposes.

    :return: (SurrogateSplits)
    """
    if cfg.monitor_fraction <= 0:
        tuning = heldout = surrogate
    else:
        tuning, heldout = split(surrogate, cfg.monitor_fraction, cfg.seed)

    classes = cfg.main_classes()
    poisoned = build_poisoned_dataset(tuning, trig, cfg.target_label, classes)
    monitor = poisoned if heldout is tuning else build_poisoned_dataset(heldout, trig, cfg.target_label, classes)
    return SurrogateSplits(tuning, heldout, poisoned, monitor)


@stage('inject')
def inject_stage(cfg, out, force=False):
    layout = ArtifactLayout(out)
    if _done('inject', [layout.backdoor_model, layout.injection_log], force):
        return layout.backdoor_model

    _require(layout.clean_model, 'train-clean')
    _require(os.path.join(layout.trigger_dir, 'trigger.json'), 'gen-trigger')

    model = load_checkpoint(layout.clean_model, spec=cfg.model_spec())
    trig = load_trigger(layout.trigger_dir)
    parts = surrogate_splits(cfg, _load_dataset(layout, 'surrogate', cfg), trig)

    backdoored, log = inject(model, parts.poisoned, cfg.inject_config(), monitor=parts.monitor,
                             benign=parts.tuning)
    if not cfg.timing:
        log.clear_timing()

    extra = dict(config_hash=cfg.config_hash())
    save_checkpoint(backdoored, layout.backdoor_model, extra=extra)
    log.save(layout.injection_log, extra=extra)
    _logger.info(f"Wrote {layout.backdoor_model}")
    return layout.backdoor_model


def trigger_attention(model, images, trig):
    """
    Return the token attention of ``model`` on ``images`` stamped with ``trig``.
    """
    with no_grad():
        return token_attention(model, stamp(images, trig))


def attack_report(cfg, name, clean, attacked, trig, test, parts, tpr, seconds):
    """
    Measure an attacked model against its clean original.

    The attention rate is measured on held-out surrogate images, where the
    trigger was optimized; ``details`` adds the rate on main-task test images
    and, when the initial pattern is known, both rates for it.

    :param test: (LabeledDataset) clean main-task test images
    :param parts: (SurrogateSplits) the surrogate images
    :return: (tuple) (AttackReport, surrogate token attention of the initial
        trigger or None, surrogate token attention of the final trigger)
    """
    y_t = cfg.target_label
    settings = cfg.data['evaluate']
    exclude = settings['exclude_true_target']
    triggered = stamp_dataset(test, trig)

    count = settings['attention_samples']
    surrogate_sample, test_sample = parts.heldout.images[:count], test.images[:count]

    final_vec = trigger_attention(clean, surrogate_sample, trig)
    details = dict(asr_reld_clean=asr(clean, triggered, y_t, exclude_true_target=exclude),
                   ar_test=attention_rate(trigger_attention(clean, test_sample, trig), trig))

    initial_vec = None
    if trig.initial is not None:
        initial = trig.initial_trigger()
        initial_vec = trigger_attention(clean, surrogate_sample, initial)
        details['ar_initial'] = attention_rate(initial_vec, trig)
        details['ar_initial_test'] = attention_rate(trigger_attention(clean, test_sample, initial), trig)

    report = AttackReport(name,
                          cda_before=cda(clean, test),
                          cda_after=cda(attacked, test),
                          asr_surd=asr(attacked, parts.monitor, y_t),
                          asr_reld=asr(attacked, triggered, y_t, exclude_true_target=exclude),
                          ar=attention_rate(final_vec, trig),
                          tpr=tpr,
                          inject_seconds=seconds if cfg.timing else 0.0,
                          config_hash=cfg.config_hash(),
                          details=details)
    return report, initial_vec, final_vec


@stage('evaluate')
def evaluate_stage(cfg, out, force=False):
    layout = ArtifactLayout(out)
    report_json = os.path.join(layout.report_dir, 'report.json')
    heatmap = os.path.join(layout.report_dir, 'attention.png')
    if _done('evaluate', [report_json, heatmap], force):
        return report_json

    _require(layout.backdoor_model, 'inject')
    spec = cfg.model_spec()
    clean = load_checkpoint(layout.clean_model, spec=spec)
    backdoored = load_checkpoint(layout.backdoor_model, spec=spec)
    trig = load_trigger(layout.trigger_dir)
    log = InjectionLog.load(layout.injection_log)

    test = _load_dataset(layout, 'main_test', cfg)
    parts = surrogate_splits(cfg, _load_dataset(layout, 'surrogate', cfg), trig)
    tpr = log.selection['tpr'] if log.selection else 0.0

    report, initial_vec, final_vec = attack_report(cfg, cfg.name, clean, backdoored, trig, test,
                                                   parts, tpr, log.seconds)

    mkdirs(layout.report_dir)
    vectors, titles = [final_vec], ['final trigger']
    if initial_vec is not None:
        vectors, titles = [initial_vec, final_vec], ['initial trigger', 'final trigger']
    save_heatmap(heatmap, vectors, spec.patch_size, titles=titles)

    save_reports(report_json, [report], extra=dict(config_hash=cfg.config_hash()))
    _logger.info(f"CDA {report.cda_before:.4f} -> {report.cda_after:.4f}, ASR-SurD {report.asr_surd:.4f}, "
                 f"ASR-RelD {report.asr_reld:.4f}, AR {report.ar:.3f}, TPR {report.tpr:.4f}")
    return report_json


@stage('report')
def report_stage(cfg, out=None, force=False, sources=None):
    """
    Render one or more ``report.json`` files as a table. When ``out`` is
    given, also write ``report.csv`` and ``report.txt`` there.

    :param sources: (list of str) report files; default ``<out>/report/report.json``
    :return: (str) the text table
    """
    layout = ArtifactLayout(out) if out else None
    if not sources:
        if layout is None:
            raise MissingArtifactError("report: no report files given and no output directory")
        sources = [os.path.join(layout.report_dir, 'report.json')]

    reports = []
    for path in sources:
        _require(path, 'evaluate')
        reports.extend(load_reports(path))

    config_hash = cfg.config_hash() if cfg else reports[0].config_hash if reports else None

    if layout:
        csv_path = os.path.join(layout.report_dir, 'report.csv')
        if not _done('report', [csv_path, os.path.join(layout.report_dir, 'report.txt')], force):
            write_report_files(layout.report_dir, reports, config_hash)

    return render_report(reports, fmt='text', config_hash=config_hash)


@stage('baseline')
def baseline_stage(cfg, out, force=False):
    """
    Run the data-poisoning baseline on the clean training data and write its
    checkpoint and report to ``<out>/baseline``.
    """
    layout = ArtifactLayout(out)
    model_path = os.path.join(layout.baseline_dir, 'model.bin')
    report_json = os.path.join(layout.baseline_dir, 'report.json')
    if _done('baseline', [model_path, report_json], force):
        return report_json

    _require(layout.clean_model, 'train-clean')
    _require(os.path.join(layout.trigger_dir, 'trigger.json'), 'gen-trigger')

    clean = load_checkpoint(layout.clean_model, spec=cfg.model_spec())
    trig = load_trigger(layout.trigger_dir)
    train = _load_dataset(layout, 'main_train', cfg)
    test = _load_dataset(layout, 'main_test', cfg)
    parts = surrogate_splits(cfg, _load_dataset(layout, 'surrogate', cfg), trig)

    attacked = inject_badnets_baseline(clean, train, trig, cfg.target_label, cfg.baseline_config())
    seconds = attacked.metadata['baseline_seconds']
    if not cfg.timing:
        attacked.metadata['baseline_seconds'] = 0.0

    extra = dict(config_hash=cfg.config_hash())
    save_checkpoint(attacked, model_path, extra=extra)

    report, _, _ = attack_report(cfg, 'badnets', clean, attacked, trig, test, parts, tpr=1.0, seconds=seconds)
    save_reports(report_json, [report], extra=extra)
    return report_json


@stage('cost')
def cost_stage(cfg, out):
    """
    Return a table comparing the cost of the three attack kinds on the clean model.
    """
    layout = ArtifactLayout(out)
    _require(layout.clean_model, 'train-clean')
    model = load_checkpoint(layout.clean_model, spec=cfg.model_spec())

    estimates = [cost_estimate('badnets', model),
                 cost_estimate('trojaning', model),
                 cost_estimate('dbia', model, cfg.inject_config())]
    return render_costs(estimates)


def run_all(cfg, out, force=False, baseline=False):
    """
    Run every stage in order and return the rendered report.

    :param baseline: (bool) also run the data-poisoning baseline; its row is
        added to the report
    """
    _logger.info(f"Running {cfg} in {out}")
    snapshot = os.path.join(out, 'experiment.json')
    if force or not os.path.exists(snapshot):
        with atomic_write(snapshot, 'w') as f:
            f.write(canonical_json(cfg.data))

    data = data_stage(cfg, out, force=force)
    train_clean_stage(cfg, out, force=force, train=data['main_train'])
    gen_trigger_stage(cfg, out, force=force)
    inject_stage(cfg, out, force=force)
    evaluate_stage(cfg, out, force=force)

    layout = ArtifactLayout(out)
    sources = [os.path.join(layout.report_dir, 'report.json')]
    if baseline:
        sources.append(baseline_stage(cfg, out, force=force))

    return report_stage(cfg, out, force=force, sources=sources)
