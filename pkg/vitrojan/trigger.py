#
# Attention-maximizing trigger generation and poisoned substitute datasets
#
# See LICENSE.txt for license details.
#
"""
A trigger is a 0/1 pixel mask ``m`` [h, w] and a pattern ``t`` [c, h, w].
Stamping composites it onto an image as ``(1 - m) * x + m * t``.

:py:func:`generate_trigger` optimizes the pattern so that a frozen model's
token attention concentrates on the trigger patches: the loss is the mean
squared difference between the token attention vector of stamped surrogate
images and a vector holding 1 on trigger tokens and 0 elsewhere. Only masked
pattern entries change, and the pattern is clamped to [0, 1] after each step.
"""
import os

import numpy as np
import pandas as pd

from .attention import TokenAttentionVector, default_strategy, token_attention, trigger_tokens
from .core import Timer, VitrojanObject
from .datasets import LabeledDataset
from .error import (DimensionError, EmptyDatasetError, LayoutError, NumericError,
                    OptimizationError, SidecarError, UsageError)
from .log import getLogger
from .tensor import Tensor, add, backward, expand, mean, mul, square, sub
from .tensor_io import FORMAT_VERSION, TENSOR_MAGIC, read_records, write_records
from .utils import atomic_write, mkdirs, read_json, write_json

_logger = getLogger(__name__)

TRIGGER_FILE = 'trigger.json'
PATTERN_FILE = 'pattern.bin'
INITIAL_FILE = 'initial.bin'
LOSS_FILE = 'loss.csv'

CORNERS = ('bottom-right', 'bottom-left', 'top-right', 'top-left')

STEP_RULES = ('gradient', 'sign')


class Placement(VitrojanObject):
    """
    A square trigger of ``size`` pixels placed ``offset`` pixels in from ``corner``.
    """
    def __init__(self, corner='bottom-right', size=8, offset=0):
        if corner not in CORNERS:
            raise UsageError(f"Unknown trigger corner '{corner}'; must be one of {CORNERS}")

        if size <= 0 or offset < 0:
            raise UsageError(f"Trigger placement needs size > 0 and offset >= 0, got {size}, {offset}")

        self.corner = corner
        self.size = int(size)
        self.offset = int(offset)

    def __str__(self):
        return f"<Placement {self.size}px {self.corner} offset={self.offset}>"

    def to_dict(self):
        return dict(corner=self.corner, size=self.size, offset=self.offset)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def mask(self, image_size):
        if self.size + self.offset > image_size:
            raise DimensionError(f"{self} does not fit in a {image_size}x{image_size} image")

        vertical, horizontal = self.corner.split('-')
        top = self.offset if vertical == 'top' else image_size - self.offset - self.size
        left = self.offset if horizontal == 'left' else image_size - self.offset - self.size

        mask = np.zeros((image_size, image_size))
        mask[top:top + self.size, left:left + self.size] = 1.0
        return mask


class TriggerSpec(VitrojanObject):
    """
    A trigger: binary ``mask`` [h, w], ``pattern`` [c, h, w] in [0, 1], and
    optionally the placement it was built from and its initial pattern.
    """
    def __init__(self, mask, pattern, placement=None, initial=None, metadata=None):
        mask = np.asarray(mask, dtype=np.float64)
        pattern = np.asarray(pattern, dtype=np.float64)

        if mask.ndim != 2 or pattern.ndim != 3 or pattern.shape[1:] != mask.shape:
            raise DimensionError(f"Trigger mask {mask.shape} and pattern {pattern.shape} disagree")

        if not np.isin(mask, (0.0, 1.0)).all():
            raise UsageError("Trigger mask must contain only 0 and 1")

        if pattern.min() < 0.0 or pattern.max() > 1.0:
            raise UsageError("Trigger pattern values must lie in [0, 1]")

        self.mask = mask
        self.pattern = pattern
        self.placement = placement
        self.initial = None if initial is None else np.asarray(initial, dtype=np.float64)
        self.metadata = dict(metadata or {})

    def __str__(self):
        return f"<TriggerSpec {self.pattern.shape} area={self.area_fraction:.4f} placement={self.placement}>"

    @property
    def area_fraction(self):
        return float(self.mask.sum() / self.mask.size)

    def initial_trigger(self):
        """
        Return a trigger with the same mask and the initial pattern.
        """
        if self.initial is None:
            raise UsageError("This trigger does not record its initial pattern")
        return TriggerSpec(self.mask, self.initial, placement=self.placement)


def stamp(x, trig):
    """
    Composite ``trig`` onto an image [c, h, w] or a batch [n, c, h, w].
    Pixels outside the mask are returned unchanged; pixels inside equal the pattern.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != trig.pattern.shape:
        raise DimensionError(f"Cannot stamp a {trig.pattern.shape} trigger onto images of shape {x.shape}")

    m = trig.mask
    return (1.0 - m) * x + m * trig.pattern


def stamp_tensor(images, mask, pattern):
    """
    Differentiable stamping of a pattern Tensor [c, h, w] onto a constant
    batch [n, c, h, w].
    """
    images = np.asarray(images, dtype=np.float64)
    m = np.broadcast_to(mask, pattern.shape)
    background = Tensor((1.0 - mask) * images)
    return add(background, expand(mul(pattern, Tensor(m)), images.shape[0]))


def stamp_dataset(dataset, trig, name=None):
    """
    Return a copy of ``dataset`` with every image stamped; labels are kept.
    """
    return LabeledDataset(stamp(dataset.images, trig), dataset.labels, dataset.class_names,
                          split=dataset.split, name=name or f"{dataset.name}-triggered")


def target_attention(trig, grid):
    """
    Return the target token vector: 1 on trigger tokens, 0 elsewhere.
    """
    return TokenAttentionVector(trigger_tokens(trig.mask, grid).astype(np.float64), grid)


class TriggerGenConfig(VitrojanObject):
    """
    Settings for :py:func:`generate_trigger`.

    :param block: (int or None) block whose attention is optimized; None means the last block
    :param lr: (float or None) step size, >= 0; None requires ``first_step``
    :param epochs: (int) maximum iterations, >= 0
    :param threshold: (float) stop once the loss falls below this value
    :param batch_size: (int) surrogate samples per iteration; 0 means all
    :param seed: (int) seed for the initial pattern and batch sampling
    :param step_rule: (str) 'gradient' steps by ``lr * (m * grad)``; 'sign'
        steps by ``lr * sign(m * grad)``
    :param first_step: (float or None) with the gradient rule, fix ``lr`` so
        that the first step moves the most-affected pixel by this much; ``lr``
        then stays constant
    :param strategy: (str or None) 'rollout' or 'raw'; None picks by architecture
    :param log_every: (int) log progress every this many iterations
    """
    def __init__(self, block=None, lr=0.05, epochs=200, threshold=0.0, batch_size=0, seed=0,
                 step_rule='gradient', first_step=None, strategy=None, log_every=20):
        if lr is None and first_step is None:
            raise UsageError("TriggerGenConfig: give lr, first_step, or both")

        if (lr or 0) < 0 or (first_step or 0) < 0 or epochs < 0 or batch_size < 0:
            raise UsageError("TriggerGenConfig: lr, first_step, epochs and batch_size must be >= 0")

        if step_rule not in STEP_RULES:
            raise UsageError(f"Unknown step rule '{step_rule}'; must be one of {STEP_RULES}")

        if step_rule == 'sign' and lr is None:
            raise UsageError("TriggerGenConfig: the sign rule needs lr")

        self.block = block
        self.lr = None if lr is None else float(lr)
        self.epochs = int(epochs)
        self.threshold = float(threshold)
        self.batch_size = int(batch_size)
        self.seed = int(seed)
        self.step_rule = step_rule
        self.first_step = None if first_step is None else float(first_step)
        self.strategy = strategy
        self.log_every = max(1, int(log_every))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def attention_loss(model, images, mask, pattern, target, strategy=None, block=None):
    """
    Mean squared difference between the token attention of stamped ``images``
    and ``target`` (a numpy vector over patch tokens), averaged over samples
    and tokens.
    """
    x = stamp_tensor(images, mask, pattern)
    vec = token_attention(model, x, strategy=strategy, block=block)
    goal = Tensor(np.broadcast_to(target, vec.values.shape))
    return mean(square(sub(vec.values, goal)))


def generate_trigger(model, surrogate, cfg, placement=None):
    """
    Optimize a universal trigger pattern over ``surrogate`` images.

    :param model: (Checkpoint) the frozen model; its parameters are not modified
    :param surrogate: (LabeledDataset) task-unrelated images
    :param cfg: (TriggerGenConfig) optimization settings
    :param placement: (Placement) where the trigger goes; default bottom-right, 8 pixels
    :return: (tuple) (TriggerSpec, list of per-iteration losses)
    :raises OptimizationError: if the loss or its gradient becomes non-finite
    """
    spec = model.spec
    if len(surrogate) == 0:
        raise EmptyDatasetError("Trigger generation needs a nonempty surrogate dataset")

    expected = (spec.channels, spec.image_size, spec.image_size)
    if surrogate.image_shape != expected:
        raise DimensionError(f"Surrogate images have shape {surrogate.image_shape}; the model expects {expected}")

    placement = placement or Placement()
    strategy = cfg.strategy or default_strategy(spec.use_cls_token)
    block = spec.num_blocks - 1 if cfg.block is None else cfg.block

    rng = np.random.default_rng(cfg.seed)
    mask = placement.mask(spec.image_size)
    initial = rng.uniform(0.0, 1.0, size=expected)

    frozen = model.copy()
    pattern = Tensor(initial.copy(), requires_grad=True, name='trigger')
    masked = np.broadcast_to(mask, expected)
    target = trigger_tokens(mask, spec.grid).astype(np.float64)

    N = len(surrogate)
    use_batches = 0 < cfg.batch_size < N
    history = []
    lr = cfg.lr

    with Timer('generate_trigger') as timer:
        for step in range(cfg.epochs):
            idx = np.sort(rng.choice(N, cfg.batch_size, replace=False)) if use_batches else slice(None)
            pattern.zero_grad()

            try:
                loss = attention_loss(frozen, surrogate.images[idx], mask, pattern, target,
                                      strategy=strategy, block=block)
            except NumericError as e:
                raise OptimizationError(f"Trigger generation failed at step {step + 1}: {e}")

            value = loss.item()
            history.append(value)

            if (step + 1) % cfg.log_every == 0:
                _logger.info(f"gen-trigger: step {step + 1}/{cfg.epochs} attention loss {value:.6f}")

            if value < cfg.threshold:
                _logger.info(f"gen-trigger: loss {value:.6f} below threshold {cfg.threshold} at step {step + 1}")
                break

            try:
                backward(loss)
            except NumericError as e:
                raise OptimizationError(f"Trigger generation failed at step {step + 1}: {e}")

            delta = masked * pattern.grad
            if cfg.step_rule == 'sign':
                delta = np.sign(delta)
            elif step == 0 and cfg.first_step is not None:
                peak = float(np.abs(delta).max())
                lr = cfg.first_step / peak if peak > 0 else 0.0
                _logger.info(f"gen-trigger: learning rate {lr:.6g} gives a first step of {cfg.first_step}")

            pattern.data = np.clip(pattern.data - lr * delta, 0.0, 1.0)

    _logger.info(f"{timer}")

    metadata = dict(block=block, strategy=strategy, steps=len(history), seed=cfg.seed, step_rule=cfg.step_rule,
                    lr=lr)
    trig = TriggerSpec(mask, pattern.data.copy(), placement=placement, initial=initial, metadata=metadata)
    return trig, history


class PoisonedDataset(LabeledDataset):
    """
    Stamped surrogate images, all labelled with the target class.
    """
    def __init__(self, images, target_label, class_names, provenance, name='poisoned'):
        labels = np.full(len(images), target_label, dtype=np.int64)
        super().__init__(images, labels, class_names, split='poisoned', name=name)
        self.target_label = target_label
        self.provenance = provenance


def build_poisoned_dataset(surrogate, trig, target_label, class_names):
    """
    Stamp every surrogate image with ``trig`` and label it ``target_label``.

    :param class_names: (list of str) the main task's class names
    :return: (PoisonedDataset) of the same size as ``surrogate``
    """
    provenance = getattr(surrogate, 'provenance', surrogate.name)
    if len(surrogate) == 0:
        images = np.zeros((0,) + trig.pattern.shape)
    else:
        images = stamp(surrogate.images, trig)

    return PoisonedDataset(images, target_label, class_names, provenance, name=f"{surrogate.name}-poisoned")


#
# Persistence
#
def _mask_rows(mask):
    return [''.join('1' if v else '0' for v in row) for row in mask]


def _parse_mask(rows, source):
    try:
        return np.array([[int(ch) for ch in row] for row in rows], dtype=np.float64)
    except ValueError:
        raise SidecarError(f"{source}: mask rows must contain only '0' and '1'")


def save_trigger(trig, directory, history=None, extra=None):
    """
    Write ``trig`` to ``directory`` as ``trigger.json`` (mask bitmap, placement,
    metadata), ``pattern.bin``, ``initial.bin`` (when known) and ``loss.csv``.
    """
    mkdirs(directory)
    write_records(os.path.join(directory, PATTERN_FILE), {'pattern': trig.pattern}, TENSOR_MAGIC)

    if trig.initial is not None:
        write_records(os.path.join(directory, INITIAL_FILE), {'pattern': trig.initial}, TENSOR_MAGIC)

    if history is not None:
        df = pd.DataFrame({'step': np.arange(1, len(history) + 1), 'loss': history})
        with atomic_write(os.path.join(directory, LOSS_FILE), 'w') as f:
            df.to_csv(f, index=False, float_format='%.17g')

    doc = dict(format_version=FORMAT_VERSION,
               shape=list(trig.pattern.shape),
               mask=_mask_rows(trig.mask),
               area_fraction=trig.area_fraction,
               placement=trig.placement.to_dict() if trig.placement else None,
               metadata=trig.metadata)
    doc.update(extra or {})
    write_json(os.path.join(directory, TRIGGER_FILE), doc)


def load_trigger(directory):
    """
    Load a trigger written by :py:func:`save_trigger`.

    :return: (TriggerSpec)
    """
    path = os.path.join(directory, TRIGGER_FILE)
    if not os.path.exists(path):
        raise SidecarError(f"Trigger directory '{directory}' has no {TRIGGER_FILE}")

    doc = read_json(path)
    try:
        mask = _parse_mask(doc['mask'], path)
        shape = tuple(doc['shape'])
    except KeyError as e:
        raise SidecarError(f"{path} is missing item {e}")

    pattern = read_records(os.path.join(directory, PATTERN_FILE), TENSOR_MAGIC).get('pattern')
    if pattern is None or pattern.shape != shape:
        raise LayoutError(f"{directory}: pattern does not match the declared shape {shape}")

    initial = None
    initial_path = os.path.join(directory, INITIAL_FILE)
    if os.path.exists(initial_path):
        initial = read_records(initial_path, TENSOR_MAGIC).get('pattern')

    placement = Placement.from_dict(doc['placement']) if doc.get('placement') else None
    return TriggerSpec(mask, pattern, placement=placement, initial=initial, metadata=doc.get('metadata'))


def read_loss_history(directory):
    path = os.path.join(directory, LOSS_FILE)
    if not os.path.exists(path):
        return []
    return pd.read_csv(path, float_precision='round_trip')['loss'].tolist()


def save_preview(trig, path):
    """
    Write a PNG showing the pattern inside the mask and the mask itself.
    """
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, (left, right) = plt.subplots(1, 2, figsize=(6, 3))
    left.imshow(np.transpose(trig.pattern * trig.mask, (1, 2, 0)).squeeze(), vmin=0, vmax=1)
    left.set_title('trigger')
    right.imshow(trig.mask, cmap='gray', vmin=0, vmax=1)
    right.set_title('mask')
    for ax in (left, right):
        ax.set_axis_off()

    fig.tight_layout()
    with atomic_write(path, 'wb') as f:
        fig.savefig(f, format='png')
    plt.close(fig)
