#
# Surgical backdoor injection into the most-connected neurons of one block
#
# See LICENSE.txt for license details.
#
"""
A *neuron* is an output unit of a linear layer; its tunable parameters are
its incoming weight row and its bias, and its score is the sum of the
absolute values of its incoming weights. Injection fine-tunes only the top
``n`` neurons of one block on a poisoned substitute dataset, projecting every
tuned value back into a band around its original value after every step.
"""
import numpy as np
import scipy.special

from .core import Timer, VitrojanObject
from .datasets import LabeledDataset
from .error import (DimensionError, EmptyDatasetError, NumericError, OptimizationError,
                    SelectionError, UsageError)
from .log import getLogger
from .metrics import asr
from .optim import make_optimizer
from .tensor import Tensor, backward, mul, one_hot, softmax, square, sub, tensor_sum
from .trigger import stamp
from .utils import read_json, write_json
from .vit import fit, forward, predict

_logger = getLogger(__name__)

MLP_LAYERS = ('mlp.fc1', 'mlp.fc2')
ATTN_PROJ = 'attn.proj'


def layer_paths(block, include_attn_proj=False):
    """
    Return the linear layers of ``block`` eligible for selection, sorted.
    """
    names = list(MLP_LAYERS) + ([ATTN_PROJ] if include_attn_proj else [])
    return sorted(f'blocks.{block}.{name}' for name in names)


def rank_units(weights):
    """
    Rank the output units of the given layers by the sum of absolute incoming
    weights, highest first. Ties are broken by layer path, then unit index.

    :param weights: (dict) weight matrices [out, in] keyed by layer path
    :return: (list of tuple) (layer path, unit index, score)
    """
    units = []
    for layer, W in weights.items():
        scores = np.abs(np.asarray(W)).sum(axis=1)
        units.extend((layer, j, float(score)) for j, score in enumerate(scores))

    return sorted(units, key=lambda u: (-u[2], u[0], u[1]))


class NeuronSelection(VitrojanObject):
    """
    The neurons chosen for tuning, with the resulting tuned-parameter rate.

    :param entries: (list of tuple) (layer path, unit index, score), best first
    :param fan_in: (dict) input width of each eligible layer
    :param total_count: (int) scalar parameters in the whole model
    """
    def __init__(self, entries, fan_in, total_count):
        self.entries = list(entries)
        self.fan_in = dict(fan_in)
        self.total_count = int(total_count)

    def __len__(self):
        return len(self.entries)

    def __str__(self):
        return f"<NeuronSelection n={self.n} tuned={self.tuned_count} TPR={self.tpr:.4f}>"

    @property
    def n(self):
        return len(self.entries)

    @property
    def tuned_count(self):
        return sum(self.fan_in[layer] + 1 for layer, _, _ in self.entries)

    @property
    def tpr(self):
        return self.tuned_count / self.total_count

    def units_by_layer(self):
        result = {}
        for layer, unit, _ in self.entries:
            result.setdefault(layer, []).append(unit)
        return result

    def masks(self, spec):
        """
        Return boolean masks keyed by parameter name, True on tunable entries.
        Only parameters with at least one tunable entry are included.
        """
        layout = spec.layout()
        masks = {}
        for layer, units in self.units_by_layer().items():
            w = np.zeros(layout[layer + '.weight'], dtype=bool)
            b = np.zeros(layout[layer + '.bias'], dtype=bool)
            w[units, :] = True
            b[units] = True
            masks[layer + '.weight'] = w
            masks[layer + '.bias'] = b
        return masks

    def to_dict(self):
        return dict(n=self.n, tuned_count=self.tuned_count, total_count=self.total_count, tpr=self.tpr,
                    entries=[dict(layer=layer, unit=unit, score=score) for layer, unit, score in self.entries])


def select_top_n(model, block, n=None, include_attn_proj=False, tpr_cap=None):
    """
    Select the ``n`` highest-scoring neurons of ``block``.

    :param model: (Checkpoint) the model
    :param block: (int) block index
    :param n: (int or None) neuron count; if None, the largest prefix of the
        ranking whose TPR stays within ``tpr_cap``
    :param include_attn_proj: (bool) also consider the attention output projection
    :param tpr_cap: (float or None) maximum tuned-parameter rate
    :return: (NeuronSelection)
    :raises SelectionError: if ``n`` exceeds the available units or the cap
    """
    spec = model.spec
    if not 0 <= block < spec.num_blocks:
        raise SelectionError(f"Block {block} is out of range for a model with {spec.num_blocks} blocks")

    layers = layer_paths(block, include_attn_proj)
    weights = {layer: model.parameters[layer + '.weight'].data for layer in layers}
    fan_in = {layer: W.shape[1] for layer, W in weights.items()}
    ranked = rank_units(weights)
    total = model.parameter_count()

    if n is None:
        if tpr_cap is None:
            raise SelectionError("select_top_n needs either n or tpr_cap")
        budget = tpr_cap * total
        n = tuned = 0
        for layer, _, _ in ranked:
            cost = fan_in[layer] + 1
            if tuned + cost > budget:
                break
            tuned += cost
            n += 1

    if not 0 <= n <= len(ranked):
        raise SelectionError(f"Cannot select {n} neurons; block {block} offers {len(ranked)} units in {layers}")

    selection = NeuronSelection(ranked[:n], fan_in, total)
    if tpr_cap is not None and selection.tpr > tpr_cap:
        raise SelectionError(f"Selecting {n} neurons tunes {selection.tpr:.4%} of parameters, above the cap {tpr_cap:.4%}")

    _logger.info(f"Selected {selection}")
    return selection


def project(theta, theta0, eps, zero_floor):
    """
    Clamp ``theta`` element-wise into ``[theta0 - eps*|theta0|, theta0 + eps*|theta0|]``;
    where ``theta0`` is 0, into ``[-zero_floor, zero_floor]``.
    """
    theta, theta0 = np.asarray(theta), np.asarray(theta0)
    if theta.shape != theta0.shape:
        raise DimensionError(f"project: shapes {theta.shape} and {theta0.shape} differ")

    band = eps * np.abs(theta0)
    zero = theta0 == 0
    lo = np.where(zero, -zero_floor, theta0 - band)
    hi = np.where(zero, zero_floor, theta0 + band)
    return np.clip(theta, lo, hi)


def default_zero_floor(*arrays):
    """
    Return 1% of the mean magnitude over all entries of ``arrays``, the
    original tensors of one layer.
    """
    values = np.concatenate([np.abs(np.asarray(a)).ravel() for a in arrays]) if arrays else np.zeros(0)
    return 0.01 * float(values.mean()) if values.size else 0.0


def layer_floors(theta0, layers, zero_floor=None):
    """
    Return the zero floor for each tuned tensor, shared by the weight and bias
    of a layer.

    :param theta0: (dict) original arrays keyed by parameter name
    :param layers: (iterable of str) layer paths with tuned units
    :param zero_floor: (float or None) fixed floor; None derives one per layer
    """
    floors = {}
    for layer in layers:
        names = [name for name in (layer + '.weight', layer + '.bias') if name in theta0]
        floor = default_zero_floor(*[theta0[name] for name in names]) if zero_floor is None else zero_floor
        floors.update((name, floor) for name in names)
    return floors


class InjectConfig(VitrojanObject):
    """
    Settings for :py:func:`inject`.

    :param block: (int or None) block to tune; None means the last block
    :param n: (int or None) neuron count; None selects as many as ``tpr_cap`` allows
    :param tpr_cap: (float) maximum tuned-parameter rate
    :param epsilon: (float) relative bound on each tuned parameter's change
    :param lr: (float) learning rate
    :param epochs: (int) maximum passes over the poisoned set
    :param threshold: (float) stop once the monitored attack success rate exceeds this
    :param seed: (int) shuffling seed
    :param zero_floor: (float or None) absolute bound for parameters whose
        original value is 0; None means 1% of the mean magnitude of that
        parameter's layer
    :param optimizer: (str) 'sgd' or 'adam'
    :param include_attn_proj: (bool) also consider the attention output projection
    :param batch_size: (int) samples per step; 0 means the whole set
    :param monitor_every: (int) measure the attack success rate every this many epochs
    :param monitor_steps: (int) if positive, also measure it every this many
        steps and stop as soon as it exceeds ``threshold``
    :param clean_weight: (float) weight of a second loss term that keeps the
        model's outputs on the unstamped surrogate images equal to the clean
        model's; 0 tunes on the poisoned images alone
    """
    def __init__(self, block=None, n=None, tpr_cap=0.06, epsilon=2.0, lr=0.05, epochs=100, threshold=0.99,
                 seed=0, zero_floor=None, optimizer='sgd', include_attn_proj=False, batch_size=0,
                 monitor_every=1, monitor_steps=0, clean_weight=0.0):
        if epsilon <= 0:
            raise UsageError(f"InjectConfig: epsilon must be positive, got {epsilon}")

        if epochs < 0 or lr < 0 or batch_size < 0:
            raise UsageError("InjectConfig: epochs, lr and batch_size must be >= 0")

        if n is not None and n < 0:
            raise UsageError(f"InjectConfig: n must be >= 0, got {n}")

        if clean_weight < 0 or monitor_steps < 0:
            raise UsageError("InjectConfig: clean_weight and monitor_steps must be >= 0")

        self.block = block
        self.n = n
        self.tpr_cap = tpr_cap
        self.epsilon = float(epsilon)
        self.lr = float(lr)
        self.epochs = int(epochs)
        self.threshold = float(threshold)
        self.seed = int(seed)
        self.zero_floor = zero_floor
        self.optimizer = optimizer
        self.include_attn_proj = bool(include_attn_proj)
        self.batch_size = int(batch_size)
        self.monitor_every = max(1, int(monitor_every))
        self.monitor_steps = int(monitor_steps)
        self.clean_weight = float(clean_weight)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class InjectionLog(VitrojanObject):
    """
    Per-epoch loss and attack success rate, timing, and the selection used.
    """
    def __init__(self, selection=None, epsilon=None, epochs=None, seconds=0.0, stop_reason=None):
        self.selection = selection
        self.epsilon = epsilon
        self.epochs = list(epochs or [])
        self.seconds = seconds
        self.stop_reason = stop_reason

    def record(self, epoch, loss, asr_surd, seconds, steps=0):
        entry = dict(epoch=epoch, steps=steps, loss=loss, asr_surd=asr_surd, seconds=seconds)
        self.epochs.append(entry)
        return entry

    def clear_timing(self):
        self.seconds = 0.0
        for entry in self.epochs:
            entry['seconds'] = 0.0

    @property
    def final_asr(self):
        values = [e['asr_surd'] for e in self.epochs if e['asr_surd'] is not None]
        return values[-1] if values else None

    def to_dict(self):
        sel = self.selection.to_dict() if isinstance(self.selection, NeuronSelection) else self.selection
        return dict(epsilon=self.epsilon, seconds=self.seconds, stop_reason=self.stop_reason,
                    final_asr_surd=self.final_asr, tpr=sel['tpr'] if sel else 0.0,
                    selection=sel, epochs=self.epochs)

    @classmethod
    def from_dict(cls, d):
        return cls(selection=d.get('selection'), epsilon=d.get('epsilon'), epochs=d.get('epochs'),
                   seconds=d.get('seconds', 0.0), stop_reason=d.get('stop_reason'))

    def save(self, path, extra=None):
        d = self.to_dict()
        d.update(extra or {})
        write_json(path, d)

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path))


def _check_classes(model, dataset, label):
    if len(dataset.class_names) != model.spec.num_classes:
        raise DimensionError(f"{label} '{dataset.name}' has {len(dataset.class_names)} classes; "
                             f"the model has {model.spec.num_classes}")


def clean_outputs(model, images):
    """
    Return the softmax outputs of ``model`` on ``images`` as a numpy array.
    """
    return scipy.special.softmax(predict(model, images), axis=-1)


def inject(model, poisoned, cfg, monitor=None, benign=None, on_step=None):
    """
    Fine-tune the selected neurons of ``model`` on ``poisoned`` with projected
    gradient steps, minimizing the squared error between softmax outputs and
    the one-hot target label. With ``cfg.clean_weight`` > 0 the loss adds,
    with that weight, the squared error between the outputs on ``benign``
    and the clean model's outputs there.

    :param model: (Checkpoint) the clean model; not modified
    :param poisoned: (PoisonedDataset) stamped surrogate images labelled with the target
    :param cfg: (InjectConfig) settings
    :param monitor: (LabeledDataset or None) held-out poisoned images used for
        the stop criterion; defaults to ``poisoned``
    :param benign: (LabeledDataset or None) the surrogate images of
        ``poisoned`` before stamping, in the same order; required when
        ``cfg.clean_weight`` > 0
    :param on_step: (callable or None) called as ``on_step(checkpoint)`` after
        every projected step
    :return: (tuple) (backdoored Checkpoint, InjectionLog)
    :raises OptimizationError: if the loss or its gradient becomes non-finite
    """
    if len(poisoned) == 0:
        raise EmptyDatasetError("Injection needs a nonempty poisoned dataset")

    monitor = monitor if monitor is not None and len(monitor) else poisoned
    _check_classes(model, poisoned, 'Poisoned set')
    _check_classes(model, monitor, 'Monitor set')

    if cfg.clean_weight > 0:
        if benign is None:
            raise UsageError("A positive clean_weight needs the unstamped surrogate images")
        if len(benign) != len(poisoned):
            raise DimensionError(f"Unstamped set holds {len(benign)} images; the poisoned set holds {len(poisoned)}")

    spec = model.spec
    block = spec.num_blocks - 1 if cfg.block is None else cfg.block
    target_label = int(poisoned.labels[0])

    selection = select_top_n(model, block, n=cfg.n, include_attn_proj=cfg.include_attn_proj, tpr_cap=cfg.tpr_cap)
    log = InjectionLog(selection=selection, epsilon=cfg.epsilon)

    backdoored = model.copy()
    masks = selection.masks(spec)
    backdoored.requires_grad_(masks.keys())

    theta0 = {name: backdoored.parameters[name].data.copy() for name in masks}
    floors = layer_floors(theta0, selection.units_by_layer(), cfg.zero_floor)

    def projection(params):
        for name, p in params.items():
            projected = project(p.data, theta0[name], cfg.epsilon, floors[name])
            p.data = np.where(masks[name], projected, theta0[name])

        if on_step:
            on_step(backdoored)

    C = spec.num_classes
    goals = one_hot(poisoned.labels, C)
    if cfg.clean_weight > 0:
        reference = clean_outputs(model, benign.images)

    def objective(idx):
        images, goal = poisoned.images[idx], goals[idx]
        weights = np.ones(len(idx))
        if cfg.clean_weight > 0:
            images = np.concatenate([images, benign.images[idx]])
            goal = np.concatenate([goal, reference[idx]])
            weights = np.concatenate([weights, np.full(len(idx), cfg.clean_weight)])

        logits, _ = forward(backdoored, images)
        err = square(sub(softmax(logits, axis=-1), Tensor(goal)))
        # each term is a mean over its own samples and classes
        scale = np.repeat(weights[:, None] / (len(idx) * C), C, axis=1)
        return tensor_sum(mul(err, Tensor(scale)))

    optimizer = make_optimizer(cfg.optimizer, backdoored.parameters, cfg.lr, masks=masks, step_hook=projection)
    rng = np.random.default_rng(cfg.seed)
    N = len(poisoned)
    batch_size = cfg.batch_size or N

    timer = Timer('inject').start()

    rate = asr(backdoored, monitor, target_label)
    log.record(0, None, rate, 0.0)

    if rate > cfg.threshold:
        log.stop_reason = 'threshold'
    elif not masks:
        _logger.warning("No neurons selected; injection leaves the model unchanged")
        log.stop_reason = 'empty-selection'

    epoch = step = measured = 0
    while log.stop_reason is None and epoch < cfg.epochs:
        epoch += 1
        order = rng.permutation(N)
        losses = []
        for start in range(0, N, batch_size):
            idx = np.sort(order[start:start + batch_size])
            optimizer.zero_grad()
            try:
                loss = objective(idx)
                backward(loss)
                optimizer.step()
            except NumericError as e:
                raise OptimizationError(f"Injection failed in epoch {epoch}: {e}")
            losses.append(loss.item())
            step += 1

            if cfg.monitor_steps and step % cfg.monitor_steps == 0:
                rate, measured = asr(backdoored, monitor, target_label), step
                if rate > cfg.threshold:
                    break

        if measured != step:
            rate = asr(backdoored, monitor, target_label) if epoch % cfg.monitor_every == 0 else None
            measured = step if rate is not None else measured

        entry = log.record(epoch, float(np.mean(losses)), rate, timer.seconds(), steps=step)
        _logger.info(f"inject: epoch {epoch}/{cfg.epochs} step {step} loss {entry['loss']:.6f} ASR-SurD {rate}")

        if rate is not None and rate > cfg.threshold:
            log.stop_reason = 'threshold'

    timer.stop()
    log.stop_reason = log.stop_reason or 'epochs'
    log.seconds = timer.seconds()

    if log.stop_reason == 'epochs' and cfg.epochs > 0:
        final = asr(backdoored, monitor, target_label)
        if final <= cfg.threshold:
            _logger.warning(f"ASR-SurD {final:.4f} did not exceed {cfg.threshold} within {cfg.epochs} epochs")

    backdoored.requires_grad_(flag=False)
    backdoored.metadata.update(injected=True, block=block, epsilon=cfg.epsilon, target_label=target_label,
                               tpr=selection.tpr, inject_epochs=epoch, inject_steps=step)
    _logger.info(f"{timer}")
    return backdoored, log


class BadNetsConfig(VitrojanObject):
    """
    Settings for the data-poisoning baseline, which fine-tunes every parameter
    on a mix of clean and stamped training images.
    """
    def __init__(self, epochs=3, batch_size=64, lr=5e-4, optimizer='adam', seed=0, poison_fraction=0.1,
                 log_every=1):
        if not 0 <= poison_fraction <= 1:
            raise UsageError(f"BadNetsConfig: poison_fraction must lie in [0, 1], got {poison_fraction}")

        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.lr = float(lr)
        self.optimizer = optimizer
        self.seed = int(seed)
        self.poison_fraction = float(poison_fraction)
        self.log_every = max(1, int(log_every))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def mix_poison(clean, trig, target_label, fraction, seed):
    """
    Return ``clean`` plus stamped copies of a random ``fraction`` of it, the
    copies labelled ``target_label``.
    """
    k = int(round(fraction * len(clean)))
    if k == 0:
        return clean

    idx = np.sort(np.random.default_rng(seed).choice(len(clean), k, replace=False))
    images = np.concatenate([clean.images, stamp(clean.images[idx], trig)])
    labels = np.concatenate([clean.labels, np.full(k, target_label, dtype=np.int64)])
    return LabeledDataset(images, labels, clean.class_names, split=clean.split, name=f"{clean.name}-mixed")


def inject_badnets_baseline(model, clean, trig, target_label, hyper):
    """
    Fine-tune all parameters of a copy of ``model`` on clean training data
    mixed with poisoned copies. Needs the clean training data.

    :return: (Checkpoint)
    :raises TrainingError: if the loss diverges
    """
    mixed = mix_poison(clean, trig, target_label, hyper.poison_fraction, hyper.seed)
    backdoored = model.copy()

    with Timer('baseline') as timer:
        fit(backdoored, mixed, hyper, label='baseline')

    backdoored.metadata.update(baseline='badnets', poison_fraction=hyper.poison_fraction,
                               target_label=target_label, tpr=1.0, baseline_seconds=timer.seconds())
    return backdoored
