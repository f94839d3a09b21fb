#
# A small vision transformer: patch embedding, CLS token, pre-norm blocks, head
#
# See LICENSE.txt for license details.
#
"""
Parameters live in a flat dict keyed by layer path, e.g.
``blocks.2.mlp.fc1.weight``. Linear weights are stored as ``[out, in]``, so
the incoming weights of output unit ``j`` are row ``j`` of the weight matrix.

Patch tokens are numbered row-major over the patch grid; when the model has a
CLS token it is token 0 and patch ``k`` is token ``k + 1``.
"""
import math
import os

import numpy as np
from scipy.stats import truncnorm

from .core import Timer, VitrojanObject
from .config import getParamAsInt
from .error import (DataError, DimensionError, EmptyDatasetError, LabelRangeError,
                    LayoutError, NumericError, SidecarError, TrainingError)
from .log import getLogger
from .optim import make_optimizer
from .tensor import (Tensor, add, as_tensor, backward, concat, cross_entropy, expand, gelu,
                     layernorm, matmul, mean, mul, no_grad, reshape, softmax, transpose)
from .tensor_io import CHECKPOINT_MAGIC, FORMAT_VERSION, read_records, write_records
from .utils import read_json, write_json

_logger = getLogger(__name__)

INIT_STD = 0.02


class ModelSpec(VitrojanObject):
    """
    Architecture of a vision transformer.

    :param image_size: (int) pixels per side
    :param channels: (int) color channels
    :param patch_size: (int) pixels per patch side; must divide ``image_size``
    :param embed_dim: (int) token width; must be divisible by ``num_heads``
    :param num_heads: (int) attention heads per block
    :param num_blocks: (int) transformer blocks
    :param mlp_ratio: (float) hidden width of the MLP as a multiple of ``embed_dim``
    :param num_classes: (int) output classes
    :param use_cls_token: (bool) prepend a learned CLS token and classify from
        it; otherwise classify from the mean of the patch tokens.
    """
    _fields = ('image_size', 'channels', 'patch_size', 'embed_dim', 'num_heads',
               'num_blocks', 'mlp_ratio', 'num_classes', 'use_cls_token')

    def __init__(self, image_size=32, channels=3, patch_size=8, embed_dim=64, num_heads=4,
                 num_blocks=3, mlp_ratio=2.0, num_classes=4, use_cls_token=True):
        self.image_size = int(image_size)
        self.channels = int(channels)
        self.patch_size = int(patch_size)
        self.embed_dim = int(embed_dim)
        self.num_heads = int(num_heads)
        self.num_blocks = int(num_blocks)
        self.mlp_ratio = float(mlp_ratio)
        self.num_classes = int(num_classes)
        self.use_cls_token = bool(use_cls_token)
        self.validate()

    def validate(self):
        for name in ('image_size', 'channels', 'patch_size', 'embed_dim', 'num_heads', 'num_blocks', 'num_classes'):
            if getattr(self, name) <= 0:
                raise DimensionError(f"ModelSpec: {name} must be positive")

        if self.image_size % self.patch_size:
            raise DimensionError(f"ModelSpec: image_size {self.image_size} is not divisible by patch_size {self.patch_size}")

        if self.embed_dim % self.num_heads:
            raise DimensionError(f"ModelSpec: embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

        if self.mlp_dim <= 0:
            raise DimensionError(f"ModelSpec: mlp_ratio {self.mlp_ratio} gives an empty MLP")

    def __str__(self):
        return (f"<ModelSpec {self.image_size}px/{self.patch_size} D={self.embed_dim} H={self.num_heads} "
                f"blocks={self.num_blocks} classes={self.num_classes} cls={self.use_cls_token}>")

    def __eq__(self, other):
        return isinstance(other, ModelSpec) and self.to_dict() == other.to_dict()

    __hash__ = object.__hash__

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def num_patches(self):
        return self.grid * self.grid

    @property
    def token_count(self):
        return self.num_patches + (1 if self.use_cls_token else 0)

    @property
    def head_dim(self):
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size

    def to_dict(self):
        return {name: getattr(self, name) for name in self._fields}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls._fields)
        if unknown:
            raise DimensionError(f"ModelSpec: unknown fields {sorted(unknown)}")
        return cls(**d)

    def layout(self):
        """
        Return the ordered parameter layout as a dict of name -> shape.
        """
        D, M, C = self.embed_dim, self.mlp_dim, self.num_classes
        layout = {
            'patch_embed.weight': (D, self.patch_dim),
            'patch_embed.bias': (D,),
        }
        if self.use_cls_token:
            layout['cls_token'] = (1, D)

        layout['pos_embed'] = (self.token_count, D)

        for i in range(self.num_blocks):
            p = f'blocks.{i}'
            layout.update({
                f'{p}.norm1.gain': (D,),
                f'{p}.norm1.bias': (D,),
                f'{p}.attn.qkv.weight': (3 * D, D),
                f'{p}.attn.qkv.bias': (3 * D,),
                f'{p}.attn.proj.weight': (D, D),
                f'{p}.attn.proj.bias': (D,),
                f'{p}.norm2.gain': (D,),
                f'{p}.norm2.bias': (D,),
                f'{p}.mlp.fc1.weight': (M, D),
                f'{p}.mlp.fc1.bias': (M,),
                f'{p}.mlp.fc2.weight': (D, M),
                f'{p}.mlp.fc2.bias': (D,),
            })

        layout.update({
            'norm.gain': (D,),
            'norm.bias': (D,),
            'head.weight': (C, D),
            'head.bias': (C,),
        })
        return layout

    def parameter_count(self):
        return sum(int(np.prod(shape)) for shape in self.layout().values())


def init_parameters(spec, seed):
    """
    Draw initial parameters: truncated normal (sigma 0.02, cut at 2 sigma) for
    weights and embeddings, ones for layernorm gains, zeros for biases.

    :return: (dict) arrays keyed by parameter name, in layout order
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.layout().items():
        if name.endswith('.bias'):
            params[name] = np.zeros(shape)
        elif name.endswith('.gain'):
            params[name] = np.ones(shape)
        else:
            params[name] = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng)
    return params


class Checkpoint(VitrojanObject):
    """
    A model: its spec, named parameter tensors, and metadata (seed, epochs,
    format version, and whatever the producing stage records).
    """
    def __init__(self, spec, parameters, metadata=None):
        self.spec = spec
        self.parameters = {name: as_tensor(value) for name, value in parameters.items()}
        self.metadata = dict(metadata or {})
        self.metadata.setdefault('format_version', FORMAT_VERSION)
        self.check_layout()

    @classmethod
    def initialize(cls, spec, seed):
        return cls(spec, init_parameters(spec, seed), metadata=dict(seed=seed, epochs=0))

    def __str__(self):
        return f"<Checkpoint {self.spec} params={self.parameter_count()}>"

    def check_layout(self):
        layout = self.spec.layout()
        if list(layout) != list(self.parameters):
            missing = set(layout) - set(self.parameters)
            extra = set(self.parameters) - set(layout)
            raise LayoutError(f"Checkpoint parameters do not match the ModelSpec layout "
                              f"(missing {sorted(missing)}, unexpected {sorted(extra)})")

        for name, shape in layout.items():
            found = self.parameters[name].shape
            if found != shape:
                raise LayoutError(f"Parameter '{name}' has shape {found}; the ModelSpec requires {shape}")

    def parameter_count(self):
        return sum(p.size for p in self.parameters.values())

    def arrays(self):
        return {name: p.data for name, p in self.parameters.items()}

    def copy(self):
        """
        Return an independent copy with no gradient tracking.
        """
        return Checkpoint(self.spec, {name: p.data.copy() for name, p in self.parameters.items()},
                          metadata=dict(self.metadata))

    def requires_grad_(self, names=None, flag=True):
        """
        Set ``requires_grad`` on the named parameters (all if ``names`` is None)
        and clear it on the others.
        """
        names = set(self.parameters) if names is None else set(names)
        for name, p in self.parameters.items():
            p.requires_grad = flag and name in names
            p.grad = None
        return self

    def identical(self, other):
        """
        Return True if ``other`` has the same spec and bit-identical parameters.
        """
        return (self.spec == other.spec and
                list(self.parameters) == list(other.parameters) and
                all(np.array_equal(p.data, other.parameters[name].data) for name, p in self.parameters.items()))


class AttentionTrace(VitrojanObject):
    """
    Post-softmax attention of every block, each a tensor of shape
    [heads, tokens, tokens] (or [n, heads, tokens, tokens] for a batch), still
    connected to the compute graph.
    """
    def __init__(self, attentions, has_cls, grid):
        self.attentions = list(attentions)
        self.blocks = list(range(len(self.attentions)))
        self.has_cls = has_cls
        self.grid = grid

    def __len__(self):
        return len(self.attentions)

    def __getitem__(self, block):
        return self.attentions[block]

    @property
    def batched(self):
        return bool(self.attentions) and self.attentions[0].ndim == 4

    def sample(self, i):
        """
        Return the trace of sample ``i`` of a batched trace.
        """
        return AttentionTrace([a[i] for a in self.attentions], self.has_cls, self.grid)


#
# Forward pass
#
def _linear(x, params, prefix):
    return add(matmul(x, transpose(params[prefix + '.weight'])), params[prefix + '.bias'])


def patchify(images, spec):
    """
    Split [n, c, h, w] images into [n, patches, c * p * p] patch vectors,
    patches numbered row-major over the grid.
    """
    n, c, g, p = images.shape[0], spec.channels, spec.grid, spec.patch_size
    x = reshape(images, (n, c, g, p, g, p))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    return reshape(x, (n, g * g, c * p * p))


def _attention(x, params, prefix, spec):
    n, T, D = x.shape
    H, dh = spec.num_heads, spec.head_dim

    qkv = reshape(_linear(x, params, prefix + '.qkv'), (n, T, 3, H, dh))
    qkv = transpose(qkv, (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]

    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)

    out = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (n, T, D))
    return _linear(out, params, prefix + '.proj'), attn


def _block(x, params, i, spec):
    p = f'blocks.{i}'
    h, attn = _attention(layernorm(x, params[p + '.norm1.gain'], params[p + '.norm1.bias']),
                         params, p + '.attn', spec)
    x = add(x, h)

    h = layernorm(x, params[p + '.norm2.gain'], params[p + '.norm2.bias'])
    h = _linear(gelu(_linear(h, params, p + '.mlp.fc1')), params, p + '.mlp.fc2')
    return add(x, h), attn


def _check_batch(batch, spec):
    expected = (spec.channels, spec.image_size, spec.image_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise DimensionError(f"Model expects images of shape [n, {expected[0]}, {expected[1]}, {expected[2]}], "
                             f"got {batch.shape}")

    if batch.shape[0] == 0:
        raise DimensionError("Empty batch")

    if batch.data.min() < 0.0 or batch.data.max() > 1.0:
        raise DataError("Pixel values must lie in [0, 1]")


def forward(model, batch, capture_attention=False):
    """
    Run ``model`` on a batch of images.

    :param model: (Checkpoint) the model
    :param batch: (Tensor or array) images [n, c, h, w] with values in [0, 1]
    :param capture_attention: (bool) if True, also return every block's attention
    :return: (tuple) (logits Tensor [n, classes], AttentionTrace or None)
    :raises DimensionError: if the batch shape does not match the model
    """
    spec, params = model.spec, model.parameters
    batch = as_tensor(batch)
    _check_batch(batch, spec)
    n = batch.shape[0]

    x = _linear(patchify(batch, spec), params, 'patch_embed')
    if spec.use_cls_token:
        x = concat([expand(params['cls_token'], n), x], axis=1)

    x = add(x, expand(params['pos_embed'], n))

    attentions = []
    for i in range(spec.num_blocks):
        x, attn = _block(x, params, i, spec)
        attentions.append(attn)

    z = x[:, 0, :] if spec.use_cls_token else mean(x, axis=1)
    z = layernorm(z, params['norm.gain'], params['norm.bias'])
    logits = _linear(z, params, 'head')

    trace = AttentionTrace(attentions, spec.use_cls_token, spec.grid) if capture_attention else None
    return logits, trace


def predict(model, images, batch_size=None, workers=None):
    """
    Return the logits of ``model`` on ``images`` without recording gradients.
    Chunks are evaluated on a dask thread pool when ``workers`` > 1; results
    are concatenated in input order.

    :param images: (array) [N, c, h, w]
    :param batch_size: (int) samples per chunk; default ``VITROJAN.EvalBatchSize``
    :param workers: (int) threads; default ``VITROJAN.EvalWorkers``
    :return: (numpy.ndarray) [N, classes]
    """
    images = np.asarray(images, dtype=np.float64)
    batch_size = batch_size or getParamAsInt('VITROJAN.EvalBatchSize')
    workers = workers or getParamAsInt('VITROJAN.EvalWorkers')

    if images.shape[0] == 0:
        return np.zeros((0, model.spec.num_classes))

    chunks = [images[i:i + batch_size] for i in range(0, images.shape[0], batch_size)]

    def run(chunk):
        with no_grad():
            logits, _ = forward(model, chunk)
        return logits.data

    if workers > 1 and len(chunks) > 1:
        import dask

        tasks = [dask.delayed(run)(chunk) for chunk in chunks]
        results = dask.compute(*tasks, scheduler='threads', num_workers=workers)
    else:
        results = [run(chunk) for chunk in chunks]

    return np.concatenate(results, axis=0)


#
# Clean training
#
class TrainConfig(VitrojanObject):
    """
    Hyperparameters for :py:func:`train_clean`.

    :param epochs: (int) passes over the training split
    :param batch_size: (int) samples per step
    :param lr: (float) learning rate
    :param optimizer: (str) 'adam' or 'sgd'
    :param seed: (int) seed for initialization and shuffling
    :param cda_floor: (float) held-out accuracy below which a warning status is recorded
    :param holdout_fraction: (float) fraction of the dataset held out to measure accuracy
    :param log_every: (int) log progress every this many epochs
    """
    def __init__(self, epochs=15, batch_size=64, lr=1e-3, optimizer='adam', seed=0,
                 cda_floor=0.9, holdout_fraction=0.1, log_every=1):
        if epochs < 0:
            raise TrainingError(f"TrainConfig: epochs must be >= 0, got {epochs}")

        if batch_size <= 0 or lr < 0:
            raise TrainingError(f"TrainConfig: need batch_size > 0 and lr >= 0, got {batch_size}, {lr}")

        self.epochs = int(epochs)
        self.batch_size = int(batch_size)
        self.lr = float(lr)
        self.optimizer = optimizer
        self.seed = int(seed)
        self.cda_floor = float(cda_floor)
        self.holdout_fraction = float(holdout_fraction)
        self.log_every = max(1, int(log_every))

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def accuracy(model, dataset):
    if len(dataset) == 0:
        raise EmptyDatasetError(f"Cannot measure accuracy on empty dataset '{dataset.name}'")
    predicted = predict(model, dataset.images).argmax(axis=1)
    return float(np.mean(predicted == dataset.labels))


def check_dataset(spec, dataset):
    if len(dataset) == 0:
        raise EmptyDatasetError(f"Dataset '{dataset.name}' is empty")

    if dataset.labels.max() >= spec.num_classes:
        raise LabelRangeError(f"Dataset '{dataset.name}' has label {dataset.labels.max()} "
                              f"but the model has {spec.num_classes} classes")

    expected = (spec.channels, spec.image_size, spec.image_size)
    if dataset.image_shape != expected:
        raise DimensionError(f"Dataset '{dataset.name}' holds images of shape {dataset.image_shape}, "
                             f"model expects {expected}")


def fit(model, dataset, hyper, label=None, names=None):
    """
    Minimize cross-entropy of ``model`` on ``dataset`` in place, tuning the
    named parameters (all if ``names`` is None). Used by clean training and
    the poisoning baseline.

    :return: (list of float) mean loss per epoch
    :raises TrainingError: if the loss diverges
    """
    label = label or 'train'
    model.requires_grad_(names)
    optimizer = make_optimizer(hyper.optimizer, model.parameters, hyper.lr)
    rng = np.random.default_rng(hyper.seed)
    history = []

    N = len(dataset)
    for epoch in range(hyper.epochs):
        order = rng.permutation(N)
        losses = []
        for start in range(0, N, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            optimizer.zero_grad()
            try:
                logits, _ = forward(model, dataset.images[idx])
                loss = cross_entropy(logits, dataset.labels[idx])
                backward(loss)
                optimizer.step()
            except NumericError as e:
                raise TrainingError(f"{label}: training diverged in epoch {epoch + 1}: {e}")

            losses.append(loss.item())

        history.append(float(np.mean(losses)))
        if (epoch + 1) % hyper.log_every == 0 or epoch + 1 == hyper.epochs:
            _logger.info(f"{label}: epoch {epoch + 1}/{hyper.epochs} loss {history[-1]:.4f}")

    model.requires_grad_(flag=False)
    return history


def train_clean(spec, dataset, hyper, heldout=None):
    """
    Train a model from a fixed-seed initialization with cross-entropy.

    :param spec: (ModelSpec) architecture
    :param dataset: (LabeledDataset) training data
    :param hyper: (TrainConfig) hyperparameters
    :param heldout: (LabeledDataset or None) accuracy set; if None, a
        ``hyper.holdout_fraction`` part of ``dataset`` is held out
    :return: (Checkpoint) with metadata ``heldout_cda`` and ``status``
        ('ok' or 'below-floor')
    :raises TrainingError: if the loss becomes non-finite
    """
    from .datasets import split

    check_dataset(spec, dataset)

    if heldout is None and hyper.holdout_fraction > 0 and len(dataset) > 1:
        dataset, heldout = split(dataset, hyper.holdout_fraction, hyper.seed)

    model = Checkpoint.initialize(spec, hyper.seed)

    with Timer('train_clean') as timer:
        history = fit(model, dataset, hyper, label='train-clean')

    model.metadata.update(epochs=hyper.epochs, loss_history=history)

    if heldout is not None and len(heldout):
        cda = accuracy(model, heldout)
        status = 'ok' if cda >= hyper.cda_floor else 'below-floor'
        if status != 'ok':
            _logger.warning(f"Held-out CDA {cda:.4f} is below the floor {hyper.cda_floor}")
        model.metadata.update(heldout_cda=cda, status=status)

    _logger.info(f"{timer}")
    return model


#
# Persistence
#
def sidecar_path(path):
    return os.path.splitext(path)[0] + '.json'


def save_checkpoint(model, path, extra=None):
    """
    Write ``model`` to ``path`` in the record format, with its spec and
    metadata in a JSON sidecar next to it (``model.bin`` -> ``model.json``).

    :param extra: (dict) additional sidecar items, e.g. ``config_hash``
    """
    write_records(path, model.arrays(), CHECKPOINT_MAGIC)

    sidecar = dict(spec=model.spec.to_dict(), metadata=model.metadata, format_version=FORMAT_VERSION)
    sidecar.update(extra or {})
    write_json(sidecar_path(path), sidecar)
    _logger.debug(f"Saved checkpoint to {path}")


def load_checkpoint(path, spec=None):
    """
    Load a checkpoint written by :py:func:`save_checkpoint`.

    :param spec: (ModelSpec or None) if given, the stored spec must equal it
    :raises SidecarError: if the JSON sidecar is missing or incomplete
    :raises LayoutError: if the stored parameters do not fit the ModelSpec
    """
    meta_path = sidecar_path(path)
    if not os.path.exists(meta_path):
        raise SidecarError(f"Checkpoint '{path}' has no sidecar {meta_path}")

    sidecar = read_json(meta_path)
    try:
        stored = ModelSpec.from_dict(sidecar['spec'])
    except KeyError:
        raise SidecarError(f"{meta_path} has no 'spec' item")
    except DimensionError as e:
        raise SidecarError(f"{meta_path}: invalid spec: {e}")

    if spec is not None and spec != stored:
        raise LayoutError(f"Checkpoint '{path}' was saved for {stored}, not {spec}")

    records = read_records(path, CHECKPOINT_MAGIC)
    return Checkpoint(stored, records, metadata=sidecar.get('metadata'))
