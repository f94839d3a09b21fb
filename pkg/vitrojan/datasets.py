#
# Desk-scale datasets: synthetic shape families, raw import/export, surrogate sampling
#
# See LICENSE.txt for license details.
#
"""
Images are float64 arrays of shape [N, c, h, w] with values in [0, 1].

Synthetic images are drawn from *families* of shape classes. Class names are
unique across families, so a main task built from one family and a
surrogate set built from another never share a class.

A dataset directory holds ``meta.json``, ``images.bin`` and ``labels.bin``;
the two ``.bin`` files use the record format in :py:mod:`vitrojan.tensor_io`.
"""
import os
import pickle

import numpy as np

from .core import VitrojanObject
from .error import (DataError, DimensionError, DisjointnessError, EmptyDatasetError, HeaderError,
                    InsufficientSamplesError, LabelRangeError, LayoutError, MissingArtifactError,
                    PayloadError, SidecarError, UnknownFamilyError)
from .log import getLogger
from .tensor_io import FORMAT_VERSION, TENSOR_MAGIC, read_records, write_records
from .utils import mkdirs, read_json, write_json

_logger = getLogger(__name__)

META_FILE = 'meta.json'
IMAGES_FILE = 'images.bin'
LABELS_FILE = 'labels.bin'


class LabeledDataset(VitrojanObject):
    """
    Images with integer class labels.

    :param images: (array-like) [N, c, h, w] values in [0, 1]
    :param labels: (array-like of int) [N] class indices
    :param class_names: (list of str) names of classes, indexed by label
    :param split: (str) 'train', 'test', or another tag
    :param name: (str) provenance name
    """
    def __init__(self, images, labels, class_names, split='train', name='dataset'):
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels)

        if images.ndim != 4:
            raise DimensionError(f"Dataset '{name}': images must have shape [N, c, h, w], got {images.shape}")

        if labels.shape != (images.shape[0],):
            raise DimensionError(f"Dataset '{name}': {images.shape[0]} images but labels have shape {labels.shape}")

        if labels.size and (labels.min() < 0 or labels.max() >= len(class_names)):
            raise LabelRangeError(f"Dataset '{name}': labels must lie in [0, {len(class_names)})")

        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise DataError(f"Dataset '{name}': pixel values must lie in [0, 1]")

        self.images = images
        self.labels = labels.astype(np.int64)
        self.class_names = list(class_names)
        self.split = split
        self.name = name

    def __len__(self):
        return self.images.shape[0]

    def __str__(self):
        return f"<{type(self).__name__} '{self.name}' split={self.split} N={len(self)} classes={self.class_names}>"

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def present_classes(self):
        """
        Return the set of class names that occur in the labels.
        """
        return {self.class_names[i] for i in np.unique(self.labels)}

    def subset(self, indices, split=None, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[indices], self.labels[indices], self.class_names,
                              split=split or self.split, name=name or self.name)


class SurrogateDataset(LabeledDataset):
    """
    Task-unrelated images used in place of the victim's training data. The
    labels are the surrogate source's own classes and serve only as provenance.
    """
    def __init__(self, images, labels, class_names, provenance, split='surrogate', name='surrogate'):
        super().__init__(images, labels, class_names, split=split, name=name)
        self.provenance = provenance


#
# Synthetic shape families
#
# Each class is a predicate on coordinates (u, v) normalized to the shape's
# bounding box, where |u| <= 1 and |v| <= 1 lie inside the box.
#
def _box(u, v):
    return (np.abs(u) <= 1) & (np.abs(v) <= 1)

_SHAPES = {
    # main-task classes
    'bars':     lambda u, v: _box(u, v) & (np.floor((v + 1) * 2.5) % 2 == 0),
    'disc':     lambda u, v: u * u + v * v <= 1,
    'cross':    lambda u, v: ((np.abs(u) <= 0.3) & (np.abs(v) <= 1)) | ((np.abs(v) <= 0.3) & (np.abs(u) <= 1)),
    'checker':  lambda u, v: _box(u, v) & ((np.floor((u + 1) * 2) + np.floor((v + 1) * 2)) % 2 == 0),

    # surrogate classes
    'ring':     lambda u, v: (u * u + v * v <= 1) & (u * u + v * v >= 0.36),
    'triangle': lambda u, v: (v <= 1) & (v >= -1) & (np.abs(u) <= (v + 1) / 2),
    'diagonal': lambda u, v: _box(u, v) & (np.floor((u + v + 2) * 2) % 2 == 0),
    'frame':    lambda u, v: _box(u, v) & (np.maximum(np.abs(u), np.abs(v)) >= 0.7),
    'dots':     lambda u, v: _box(u, v) & (((u * 2.5) % 1 - 0.5) ** 2 + ((v * 2.5) % 1 - 0.5) ** 2 <= 0.09),
}

FAMILIES = {
    'shapes': ['bars', 'disc', 'cross', 'checker'],
    'glyphs': ['ring', 'triangle', 'diagonal', 'frame', 'dots'],
}


def family_classes(family):
    try:
        return list(FAMILIES[family])
    except KeyError:
        raise UnknownFamilyError(f"Unknown class family '{family}'; known families are {sorted(FAMILIES)}")


class SyntheticSpec(VitrojanObject):
    """
    Parameters of the synthetic image generator.

    :param family: (str) a key of ``FAMILIES``
    :param image_size: (int) pixels per side
    :param channels: (int) color channels
    :param noise: (float) standard deviation of additive Gaussian pixel noise
    :param min_scale, max_scale: (float) range of the shape's half-size as a
        fraction of the image side
    """
    def __init__(self, family='shapes', image_size=32, channels=3, noise=0.05,
                 min_scale=0.2, max_scale=0.4):
        family_classes(family)

        if not 0 < min_scale <= max_scale:
            raise DataError(f"SyntheticSpec: need 0 < min_scale <= max_scale, got {min_scale}, {max_scale}")

        self.family = family
        self.image_size = int(image_size)
        self.channels = int(channels)
        self.noise = float(noise)
        self.min_scale = float(min_scale)
        self.max_scale = float(max_scale)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return dict(family=self.family, image_size=self.image_size, channels=self.channels,
                    noise=self.noise, min_scale=self.min_scale, max_scale=self.max_scale)


def _draw_sample(rng, shape_name, spec):
    size = spec.image_size
    coords = (np.arange(size) + 0.5) / size
    y, x = np.meshgrid(coords, coords, indexing='ij')

    scale = rng.uniform(spec.min_scale, spec.max_scale)
    cx, cy = rng.uniform(scale, 1 - scale, size=2)
    mask = _SHAPES[shape_name]((x - cx) / scale, (y - cy) / scale)

    background = rng.uniform(0.0, 0.35, size=spec.channels)
    foreground = rng.uniform(0.6, 1.0, size=spec.channels)

    image = np.where(mask[None, :, :], foreground[:, None, None], background[:, None, None])
    image = image + rng.normal(0.0, spec.noise, size=image.shape)
    return np.clip(image, 0.0, 1.0)


def gen_synthetic(spec, n, seed, split='train', name=None):
    """
    Generate ``n`` images of the classes in ``spec.family``, balanced across
    classes. Each sample uses its own generator derived from ``seed``, so a
    sample's pixels do not depend on how many samples are drawn after it.

    :param spec: (SyntheticSpec) generator parameters
    :param n: (int) number of samples, > 0
    :param seed: (int) random seed
    :return: (LabeledDataset)
    """
    if n <= 0:
        raise EmptyDatasetError(f"gen_synthetic: n must be positive, got {n}")

    classes = family_classes(spec.family)
    C = len(classes)

    labels = np.arange(n) % C
    labels = np.random.default_rng(seed).permutation(labels)

    children = np.random.SeedSequence(seed).spawn(n)
    images = np.empty((n, spec.channels, spec.image_size, spec.image_size))
    for i, (label, child) in enumerate(zip(labels, children)):
        images[i] = _draw_sample(np.random.default_rng(child), classes[label], spec)

    name = name or f"{spec.family}-{split}"
    _logger.debug(f"Generated {n} '{spec.family}' images with seed {seed}")
    return LabeledDataset(images, labels, classes, split=split, name=name)


def resize_nearest(images, size):
    """
    Resize [N, c, h, w] images to [N, c, size, size] by nearest-neighbor sampling.
    """
    images = np.asarray(images)
    h, w = images.shape[-2:]
    if (h, w) == (size, size):
        return images

    rows = np.floor((np.arange(size) + 0.5) * h / size).astype(np.int64)
    cols = np.floor((np.arange(size) + 0.5) * w / size).astype(np.int64)
    return images[..., rows[:, None], cols[None, :]]


def conform(dataset, image_size):
    """
    Return ``dataset`` with images resized to ``image_size``, if necessary.
    """
    if dataset.images.shape[-1] == image_size and dataset.images.shape[-2] == image_size:
        return dataset

    _logger.info(f"Resizing '{dataset.name}' from {dataset.images.shape[-2:]} to {image_size}x{image_size}")
    resized = resize_nearest(dataset.images, image_size)
    cls = type(dataset)
    if isinstance(dataset, SurrogateDataset):
        return cls(resized, dataset.labels, dataset.class_names, dataset.provenance,
                   split=dataset.split, name=dataset.name)

    return LabeledDataset(resized, dataset.labels, dataset.class_names, split=dataset.split, name=dataset.name)


#
# Raw import / export
#
def export_raw(dataset, path, extra=None):
    """
    Write ``dataset`` to the directory ``path`` as ``meta.json``, ``images.bin``
    and ``labels.bin``.

    :param extra: (dict) additional items to store in ``meta.json``
    """
    mkdirs(path)
    write_records(os.path.join(path, IMAGES_FILE), {'images': dataset.images}, TENSOR_MAGIC)
    write_records(os.path.join(path, LABELS_FILE), {'labels': dataset.labels.astype(np.float64)}, TENSOR_MAGIC)

    meta = dict(format_version=FORMAT_VERSION,
                name=dataset.name,
                split=dataset.split,
                shape=list(dataset.images.shape),
                class_names=dataset.class_names)

    if isinstance(dataset, SurrogateDataset):
        meta['provenance'] = dataset.provenance

    meta.update(extra or {})

    # written last so a directory with meta.json is complete
    write_json(os.path.join(path, META_FILE), meta)


def load_raw(path):
    """
    Load a dataset directory written by :py:func:`export_raw`.

    :raises SidecarError: if ``meta.json`` is missing or incomplete
    :raises LayoutError: if the stored arrays disagree with ``meta.json``
    """
    meta_path = os.path.join(path, META_FILE)
    if not os.path.exists(meta_path):
        raise SidecarError(f"Dataset directory '{path}' has no {META_FILE}")

    meta = read_json(meta_path)
    try:
        shape = tuple(meta['shape'])
        class_names = meta['class_names']
    except KeyError as e:
        raise SidecarError(f"{meta_path} is missing item {e}")

    images = read_records(os.path.join(path, IMAGES_FILE), TENSOR_MAGIC).get('images')
    labels = read_records(os.path.join(path, LABELS_FILE), TENSOR_MAGIC).get('labels')

    if images is None or labels is None:
        raise LayoutError(f"Dataset '{path}' lacks the 'images' or 'labels' record")

    if images.shape != shape or labels.shape != (shape[0],):
        raise LayoutError(f"Dataset '{path}': {META_FILE} declares shape {shape} but files hold "
                          f"images {images.shape} and labels {labels.shape}")

    int_labels = labels.astype(np.int64)
    if not np.array_equal(int_labels, labels):
        raise PayloadError(f"Dataset '{path}': labels are not integers")

    split = meta.get('split', 'train')
    name = meta.get('name', os.path.basename(path))

    if 'provenance' in meta:
        return SurrogateDataset(images, int_labels, class_names, meta['provenance'], split=split, name=name)

    return LabeledDataset(images, int_labels, class_names, split=split, name=name)


BATCH_META_FILE = 'batches.meta'


def _scale_pixels(images, path):
    if images.dtype == np.uint8:
        return images.astype(np.float64) / 255.0

    if not np.issubdtype(images.dtype, np.number):
        raise PayloadError(f"Archive '{path}': images have non-numeric type {images.dtype}")

    return images.astype(np.float64)


def _channels_first(images, channels, path):
    if images.ndim == 3:
        images = images[:, None, :, :]

    if images.ndim != 4:
        raise DimensionError(f"Archive '{path}': images must have 3 or 4 dimensions, got shape {images.shape}")

    # [N, h, w, c] as most image tools store it
    if images.shape[1] not in (1, 3) and images.shape[-1] in (1, 3):
        images = images.transpose(0, 3, 1, 2)

    if channels is not None and images.shape[1] != channels:
        raise DimensionError(f"Archive '{path}': images have {images.shape[1]} channels; expected {channels}")

    return images


def _batch_class_names(path):
    meta_path = os.path.join(os.path.dirname(path), BATCH_META_FILE)
    if not os.path.exists(meta_path):
        return None

    meta = _unpickle(meta_path)
    names = meta.get(b'label_names') or meta.get(b'fine_label_names')
    return [n.decode('utf-8') if isinstance(n, bytes) else str(n) for n in names] if names else None


def _unpickle(path):
    try:
        with open(path, 'rb') as f:
            obj = pickle.load(f, encoding='bytes')
    except (pickle.UnpicklingError, EOFError, ValueError) as e:
        raise HeaderError(f"Archive '{path}' is not a pickled batch: {e}")

    if not isinstance(obj, dict):
        raise LayoutError(f"Archive '{path}' must hold a dict, got {type(obj).__name__}")

    return obj


def _read_npz(path):
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (ValueError, OSError) as e:
        raise HeaderError(f"Archive '{path}' is not a readable .npz file: {e}")

    if 'images' not in arrays or 'labels' not in arrays:
        raise LayoutError(f"Archive '{path}' lacks the 'images' or 'labels' array")

    names = arrays.get('class_names')
    return arrays['images'], arrays['labels'], (None if names is None else [str(n) for n in names])


def _read_batch(path, channels):
    batch = _unpickle(path)
    data = batch.get(b'data')
    labels = batch.get(b'labels', batch.get(b'fine_labels'))
    if data is None or labels is None:
        raise LayoutError(f"Archive '{path}' lacks the b'data' or b'labels' entry")

    data = np.asarray(data)
    if data.ndim == 2:
        # rows hold each channel's plane in turn, each plane row-major
        channels = channels or 3
        side = int(round(np.sqrt(data.shape[1] / channels)))
        if channels * side * side != data.shape[1]:
            raise DimensionError(f"Archive '{path}': rows of {data.shape[1]} values are not {channels} square planes")
        data = data.reshape(data.shape[0], channels, side, side)

    return data, np.asarray(labels), _batch_class_names(path)


def import_archive(path, class_names=None, channels=None, split='train', name=None):
    """
    Read an image archive into a dataset. Two formats are understood:

    - ``.npz`` files holding arrays ``images`` and ``labels`` and optionally
      ``class_names``;
    - CIFAR-style pickled batches: a dict with ``b'data'`` (one image per row,
      channel planes in turn) and ``b'labels'`` or ``b'fine_labels'``. Class
      names are read from a ``batches.meta`` file beside it, if present.

    Images may be [N, c, h, w], [N, h, w, c] or [N, h, w]. ``uint8`` pixels
    are scaled to [0, 1]; other values must already lie there. Pickled
    batches are loaded with :py:mod:`pickle`, so only import trusted files.

    :param path: (str) the archive
    :param class_names: (list of str) names indexed by label; overrides names
        in the archive. Without either, classes are named 'class0', 'class1', ...
    :param channels: (int or None) the expected number of channels
    :param split: (str) split tag for the dataset
    :param name: (str) provenance name; default the archive's base name
    :return: (LabeledDataset)
    :raises MissingArtifactError: if ``path`` does not exist
    :raises FileFormatError: if the archive cannot be read
    :raises DataError: if labels or pixels are out of range
    """
    if not os.path.exists(path):
        raise MissingArtifactError(f"Archive '{path}' does not exist")

    if path.endswith('.npz'):
        images, labels, stored_names = _read_npz(path)
    else:
        images, labels, stored_names = _read_batch(path, channels)

    images = _channels_first(_scale_pixels(np.asarray(images), path), channels, path)

    int_labels = labels.astype(np.int64)
    if not np.array_equal(int_labels, labels):
        raise PayloadError(f"Archive '{path}': labels are not integers")

    names = class_names or stored_names
    if names is None:
        count = int(int_labels.max()) + 1 if int_labels.size else 0
        names = [f"class{i}" for i in range(count)]

    name = name or os.path.splitext(os.path.basename(path))[0]
    dataset = LabeledDataset(images, int_labels, names, split=split, name=name)
    _logger.info(f"Imported {dataset} from '{path}'")
    return dataset


#
# Surrogate sampling
#
class SurrogatePolicy(VitrojanObject):
    """
    How to draw a surrogate dataset.

    :param source_name: (str) name recorded as provenance
    :param count: (int) number of samples to draw (2,000 by default)
    :param require_disjoint: (bool) if True, no surrogate class may be a
        class of the main task
    :param seed: (int) sampling seed
    """
    def __init__(self, source_name='glyphs', count=2000, require_disjoint=True, seed=0):
        self.source_name = source_name
        self.count = int(count)
        self.require_disjoint = bool(require_disjoint)
        self.seed = int(seed)


def make_surrogate(source, policy, main_classes):
    """
    Draw a uniform random subset of ``policy.count`` samples from ``source``.

    :param source: (LabeledDataset) the pool of task-unrelated images
    :param policy: (SurrogatePolicy) sampling parameters
    :param main_classes: (iterable of str) the main task's class names
    :return: (SurrogateDataset)
    :raises InsufficientSamplesError: if ``source`` is smaller than requested
    :raises DisjointnessError: if disjointness is required and violated
    """
    if policy.count > len(source):
        raise InsufficientSamplesError(f"Surrogate policy requests {policy.count} samples "
                                       f"but '{source.name}' holds {len(source)}")

    if policy.require_disjoint:
        overlap = source.present_classes() & set(main_classes)
        if overlap:
            raise DisjointnessError(f"Surrogate source '{source.name}' shares classes {sorted(overlap)} with the main task")

    rng = np.random.default_rng(policy.seed)
    indices = rng.permutation(len(source))[:policy.count]

    _logger.info(f"Drew {policy.count} surrogate samples from '{source.name}'")
    return SurrogateDataset(source.images[indices], source.labels[indices], source.class_names,
                            provenance=policy.source_name, name=f"surrogate-{policy.source_name}")


def split(dataset, fraction, seed):
    """
    Randomly split ``dataset`` into two parts, the second holding
    ``round(fraction * N)`` samples.

    :return: (tuple of LabeledDataset) (first, second)
    """
    n = len(dataset)
    k = int(round(fraction * n))
    order = np.random.default_rng(seed).permutation(n)
    first, second = np.sort(order[k:]), np.sort(order[:k])

    def part(indices, tag):
        if isinstance(dataset, SurrogateDataset):
            return SurrogateDataset(dataset.images[indices], dataset.labels[indices], dataset.class_names,
                                    dataset.provenance, split=dataset.split, name=f"{dataset.name}-{tag}")
        return dataset.subset(indices, name=f"{dataset.name}-{tag}")

    return part(first, 'a'), part(second, 'b')
