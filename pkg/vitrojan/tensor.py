#
# Dense tensors with reverse-mode differentiation
#
# See LICENSE.txt for license details.
#
"""
A small tensor engine over ``numpy.float64`` arrays. Every operation returns a
new :py:class:`Tensor`; when any input requires gradients (and recording is
enabled), the result remembers its inputs and a function mapping the output
gradient to input gradients. :py:func:`backward` walks the recorded nodes in
reverse creation order and accumulates gradients into leaf tensors.

Broadcasting is limited to two forms: a 1-D tensor added to (or multiplied
with) the last axis of another tensor, and a Python scalar constant. Leading
axes are added explicitly with :py:func:`expand`.
"""
import itertools
import math
import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from .core import VitrojanObject
from .error import DimensionError, NumericError, UsageError

DTYPE = np.float64

LAYERNORM_EPS = 1e-5

_sequence = itertools.count()
_state = threading.local()


def is_grad_enabled():
    return getattr(_state, 'grad_enabled', True)


@contextmanager
def no_grad():
    """
    Context manager that disables graph recording in the current thread.
    Operations inside the block produce tensors with no history.
    """
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _check_finite(data, op):
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")


class Tensor(VitrojanObject):
    """
    A dense array of 64-bit floats in row-major order, with an optional
    gradient buffer of the same shape.

    :param data: array-like values
    :param requires_grad: (bool) whether gradients should be accumulated into
        this tensor when it is a leaf of a graph.
    :param name: (str) optional label used in messages
    """
    __slots__ = ('data', 'grad', 'requires_grad', 'name', '_parents', '_backward', '_seq', '_op')

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE)
        _check_finite(arr, 'Tensor')
        self._init(arr, requires_grad, name)

    def _init(self, arr, requires_grad, name=None, parents=(), backward=None, op='leaf'):
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = parents
        self._backward = backward
        self._seq = next(_sequence)
        self._op = op

    @classmethod
    def _make(cls, data, parents, backward, op):
        data = np.asarray(data, dtype=DTYPE)
        _check_finite(data, op)

        obj = cls.__new__(cls)
        requires = is_grad_enabled() and any(p.requires_grad for p in parents)
        if requires:
            obj._init(data, True, parents=tuple(parents), backward=backward, op=op)
        else:
            obj._init(data, False, op=op)
        return obj

    def __str__(self):
        name = f" '{self.name}'" if self.name else ''
        return f"<Tensor{name} shape={self.shape} requires_grad={self.requires_grad}>"

    __repr__ = __str__

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise UsageError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def copy(self):
        obj = Tensor(self.data, requires_grad=self.requires_grad, name=self.name)
        if self.grad is not None:
            obj.grad = self.grad.copy()
        return obj

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def __getitem__(self, key):
        return index(self, key)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise DimensionError("Tensor division is supported only by a scalar constant")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    # Tensors are graph nodes; identity semantics keep them usable as dict keys
    __hash__ = object.__hash__


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


class ComputeGraph(VitrojanObject):
    """
    The nodes reachable from a tensor, ordered by creation. Nodes that do not
    require gradients are excluded since no gradient flows through them.
    """
    def __init__(self, root):
        seen = {}
        stack = [root]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)

        self.root = root
        self.nodes = sorted(seen.values(), key=lambda t: t._seq)

    def leaves(self):
        return [node for node in self.nodes if node.is_leaf]

    def __len__(self):
        return len(self.nodes)


def backward(loss):
    """
    Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf reachable
    from ``loss`` that requires gradients. Gradients add to any existing
    ``grad`` buffer; callers zero them between optimization steps.

    :param loss: (Tensor) a single-element tensor
    :return: none
    :raises UsageError: if ``loss`` is not scalar or has no gradient history
    :raises NumericError: if a leaf's gradient contains NaN or inf
    """
    if loss.size != 1:
        raise UsageError(f"backward() requires a scalar loss, got shape {loss.shape}")

    if not loss.requires_grad:
        raise UsageError("backward() called on a tensor that does not require gradients")

    graph = ComputeGraph(loss)
    grads = {id(loss): np.ones_like(loss.data)}

    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue

        if node.is_leaf:
            _check_finite(g, f"gradient of '{node.name or node._op}'")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue

        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


#
# Shape helpers
#
def _is_bias(a, b):
    return b.ndim == 1 and a.ndim > 1 and b.shape[0] == a.shape[-1]


def _binary_shapes(a, b, op):
    """
    Return True if ``b`` broadcasts along the last axis of ``a``; False if the
    shapes are equal; raise DimensionError otherwise.
    """
    if a.shape == b.shape:
        return False

    if _is_bias(a, b):
        return True

    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _sum_to_last_axis(g):
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = axis if isinstance(axis, (tuple, list)) else (axis,)
    result = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} is out of range for a tensor with {ndim} dimensions")
        result.append(ax % ndim)
    return tuple(sorted(result))


#
# Elementwise arithmetic
#
def add(a, b):
    """
    Elementwise sum of equal-shaped tensors, a last-axis bias, or a scalar constant.
    """
    a = as_tensor(a)

    if np.isscalar(b):
        return Tensor._make(a.data + b, (a,), lambda g: (g,), 'add')

    b = as_tensor(b)
    bias = _binary_shapes(a, b, 'add')

    def _backward(g):
        gb = None
        if b.requires_grad:
            gb = _sum_to_last_axis(g) if bias else g
        return (g if a.requires_grad else None), gb

    return Tensor._make(a.data + b.data, (a, b), _backward, 'add')


def neg(a):
    return Tensor._make(-a.data, (a,), lambda g: (-g,), 'neg')


def sub(a, b):
    a = as_tensor(a)

    if np.isscalar(b):
        return Tensor._make(a.data - b, (a,), lambda g: (g,), 'sub')

    b = as_tensor(b)
    bias = _binary_shapes(a, b, 'sub')

    def _backward(g):
        gb = None
        if b.requires_grad:
            gb = -(_sum_to_last_axis(g) if bias else g)
        return (g if a.requires_grad else None), gb

    return Tensor._make(a.data - b.data, (a, b), _backward, 'sub')


def mul(a, b):
    """
    Elementwise product of equal-shaped tensors, a last-axis gain, or a scalar constant.
    """
    a = as_tensor(a)

    if np.isscalar(b):
        c = float(b)
        return Tensor._make(a.data * c, (a,), lambda g: (g * c,), 'mul')

    b = as_tensor(b)
    bias = _binary_shapes(a, b, 'mul')

    def _backward(g):
        ga = g * b.data if a.requires_grad else None
        gb = None
        if b.requires_grad:
            prod = g * a.data
            gb = _sum_to_last_axis(prod) if bias else prod
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), _backward, 'mul')


def square(a):
    return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), 'square')


def matmul(a, b):
    """
    Matrix product. ``a`` has shape [..., m, k]; ``b`` is either a matrix
    [k, n] shared across the leading axes of ``a``, or a batch [..., k, n]
    with the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)

    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires at least 2-D operands, got {a.shape} and {b.shape}")

    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ in {a.shape} and {b.shape}")

    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dimensions differ in {a.shape} and {b.shape}")

    def _backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return Tensor._make(np.matmul(a.data, b.data), (a, b), _backward, 'matmul')


#
# Shape manipulation
#
def reshape(a, shape):
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape tensor of shape {a.shape} to {shape}")

    original = a.shape
    return Tensor._make(data, (a,), lambda g: (g.reshape(original),), 'reshape')


def transpose(a, axes=None):
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of the axes of {a.shape}")

    inverse = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), 'transpose')


def index(a, key):
    """
    Basic (slice and integer) indexing; advanced indexing is not supported.
    """
    key = key if isinstance(key, tuple) else (key,)
    for k in key:
        if not (isinstance(k, (int, np.integer, slice)) or k is Ellipsis):
            raise DimensionError(f"index: unsupported index {k!r}; use slices or integers")

    try:
        data = a.data[key]
    except IndexError as e:
        raise DimensionError(f"index: {e}")

    def _backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return Tensor._make(data, (a,), _backward, 'index')


def slice_axis(a, axis, start, stop):
    """
    Select ``a[..., start:stop, ...]`` along ``axis``.
    """
    axis = _normalize_axes(axis, a.ndim)[0]
    key = tuple([slice(None)] * axis + [slice(start, stop)])
    return index(a, key)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat requires at least one tensor")

    ndim = tensors[0].ndim
    axis = _normalize_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} differ outside axis {axis}")

    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, 'concat')


def expand(a, n):
    """
    Repeat ``a`` along a new leading axis of size ``n``.
    """
    data = np.broadcast_to(a.data, (n,) + a.shape).copy()
    return Tensor._make(data, (a,), lambda g: (g.sum(axis=0),), 'expand')


#
# Reductions
#
def _expand_reduced(g, shape, axes, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    shape = a.shape
    data = a.data.sum(axis=axes, keepdims=keepdims)
    return Tensor._make(data, (a,), lambda g: (_expand_reduced(g, shape, axes, keepdims),), 'sum')


def mean(a, axis=None, keepdims=False):
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise DimensionError(f"mean over an empty axis of shape {a.shape}")

    shape = a.shape
    data = a.data.sum(axis=axes, keepdims=keepdims) / count
    return Tensor._make(data, (a,), lambda g: (_expand_reduced(g, shape, axes, keepdims) / count,), 'mean')


#
# Nonlinearities
#
def softmax(a, axis=-1):
    """
    Softmax along ``axis``, computed with max-subtraction.
    """
    axis = _normalize_axes(axis, a.ndim)[0]
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (a,), _backward, 'softmax')


def normalize(a, axis=-1):
    """
    Divide ``a`` by its sum along ``axis``. The sums must be nonzero.
    """
    axis = _normalize_axes(axis, a.ndim)[0]
    total = a.data.sum(axis=axis, keepdims=True)
    if (total == 0).any():
        raise NumericError("normalize: zero sum along the normalized axis")

    s = a.data / total

    def _backward(g):
        return ((g - (g * s).sum(axis=axis, keepdims=True)) / total,)

    return Tensor._make(s, (a,), _backward, 'normalize')


_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """
    Exact GELU, x * Phi(x).
    """
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))

    def _backward(g):
        return (g * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI),)

    return Tensor._make(x * cdf, (a,), _backward, 'gelu')


def layernorm(x, gain, bias, eps=LAYERNORM_EPS):
    """
    Normalize the last axis of ``x`` to zero mean and unit variance, then
    apply the 1-D ``gain`` and ``bias``.
    """
    gain, bias = as_tensor(gain), as_tensor(bias)
    D = x.shape[-1]
    if gain.shape != (D,) or bias.shape != (D,):
        raise DimensionError(f"layernorm: gain {gain.shape} and bias {bias.shape} must have shape ({D},)")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def _backward(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gxhat = g * gain.data
            gx = inv * (gxhat
                        - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = _sum_to_last_axis(g * xhat)
        if bias.requires_grad:
            gbias = _sum_to_last_axis(g)
        return gx, ggain, gbias

    return Tensor._make(xhat * gain.data + bias.data, (x, gain, bias), _backward, 'layernorm')


#
# Losses
#
def cross_entropy(logits, labels):
    """
    Mean cross-entropy of ``logits`` [n, C] against integer ``labels`` [n].
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} and labels {labels.shape} disagree")

    n, C = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy of an empty batch")

    if labels.min() < 0 or labels.max() >= C:
        raise DimensionError(f"cross_entropy: labels must lie in [0, {C})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def _backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / n),)

    return Tensor._make(loss, (logits,), _backward, 'cross_entropy')


def one_hot(labels, num_classes):
    labels = np.asarray(labels, dtype=np.int64)
    result = np.zeros((labels.size, num_classes), dtype=DTYPE)
    result[np.arange(labels.size), labels] = 1.0
    return result
