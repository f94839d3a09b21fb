#
# Gradient-based optimizers over named parameter maps
#
# See LICENSE.txt for license details.
#
import numpy as np

from .core import VitrojanObject
from .error import AbstractMethodError, UsageError
from .log import getLogger

_logger = getLogger(__name__)


class Optimizer(VitrojanObject):
    """
    Base class for optimizers that update a dict of :py:class:`~vitrojan.tensor.Tensor`
    parameters from their accumulated ``grad`` buffers.

    :param params: (dict) Tensors keyed by parameter name. Only those with
        ``requires_grad`` set are updated.
    :param lr: (float) learning rate
    :param masks: (dict or None) optional boolean arrays keyed by parameter
        name; only entries where the mask is True are changed. Entries outside
        the mask keep their exact previous value.
    :param step_hook: (callable or None) called as ``step_hook(params)`` after
        every step, e.g., to project parameters back into a feasible set.
    """
    def __init__(self, params, lr, masks=None, step_hook=None):
        if lr < 0:
            raise UsageError(f"Invalid learning rate: {lr}")

        self.params = {name: p for name, p in params.items() if p.requires_grad}
        self.lr = lr
        self.masks = masks or {}
        self.step_hook = step_hook
        self.steps = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _update(self, name, grad):
        raise AbstractMethodError(type(self), 'Optimizer._update')

    def step(self):
        self.steps += 1

        for name, p in self.params.items():
            if p.grad is None:
                continue

            proposed = p.data - self._update(name, p.grad)
            mask = self.masks.get(name)
            p.data = proposed if mask is None else np.where(mask, proposed, p.data)

        if self.step_hook:
            self.step_hook(self.params)


class SGD(Optimizer):
    """
    Plain gradient descent, ``p <- p - lr * grad``, with optional momentum.
    """
    def __init__(self, params, lr, momentum=0.0, masks=None, step_hook=None):
        super().__init__(params, lr, masks=masks, step_hook=step_hook)
        self.momentum = momentum
        self.velocity = {}

    def _update(self, name, grad):
        if not self.momentum:
            return self.lr * grad

        v = self.velocity.get(name)
        v = grad if v is None else self.momentum * v + grad
        self.velocity[name] = v
        return self.lr * v


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, masks=None, step_hook=None):
        super().__init__(params, lr, masks=masks, step_hook=step_hook)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = {}
        self.v = {}

    def _update(self, name, grad):
        m = self.m.get(name, 0.0)
        v = self.v.get(name, 0.0)
        self.m[name] = m = self.beta1 * m + (1 - self.beta1) * grad
        self.v[name] = v = self.beta2 * v + (1 - self.beta2) * grad * grad

        m_hat = m / (1 - self.beta1 ** self.steps)
        v_hat = v / (1 - self.beta2 ** self.steps)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind, params, lr, **kwargs):
    """
    Create an optimizer by name ('sgd' or 'adam').
    """
    classes = {'sgd': SGD, 'adam': Adam}
    cls = classes.get(kind.lower())
    if cls is None:
        raise UsageError(f"Unknown optimizer '{kind}'; must be one of {sorted(classes)}")

    return cls(params, lr, **kwargs)
