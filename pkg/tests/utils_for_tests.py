import numpy as np

from vitrojan.config import pathjoin
from vitrojan.tensor import Tensor, backward, mul, no_grad, tensor_sum
from vitrojan.vit import ModelSpec

# relative errors are measured against at least this denominator
REL_ERROR_FLOOR = 1e-8


def path_to_test_file(filename):
    path = pathjoin(__file__, '..', f'files/{filename}', abspath=True)
    return path


def tiny_spec(**kwargs):
    """
    A model small enough for finite-difference checks: 8x8 single-channel
    images, 4x4 patches (a 2x2 grid), two blocks of two heads.
    """
    args = dict(image_size=8, channels=1, patch_size=4, embed_dim=8, num_heads=2,
                num_blocks=2, mlp_ratio=2.0, num_classes=4, use_cls_token=True)
    args.update(kwargs)
    return ModelSpec(**args)


def rel_error(analytic, numeric, floor=REL_ERROR_FLOOR):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / denom)


def numeric_gradient(f, x, h=1e-6):
    """
    Central finite-difference gradient of the scalar function ``f`` at the array ``x``.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        x[idx] = orig + h
        plus = f(x)
        x[idx] = orig - h
        minus = f(x)
        x[idx] = orig
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def gradient_errors(fn, *arrays, seed=0, h=1e-6):
    """
    Compare the gradients computed by ``backward`` for ``fn(*tensors)`` with
    finite differences. A non-scalar output is reduced with fixed random
    weights first.

    :return: (list of float) the relative error for each input
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*inputs)
    weights = np.random.default_rng(seed).normal(size=out.shape)
    backward(tensor_sum(mul(out, Tensor(weights))))

    def scalar(values):
        with no_grad():
            return float((fn(*[Tensor(v) for v in values]).data * weights).sum())

    errors = []
    for i, t in enumerate(inputs):
        def f(a, i=i):
            values = list(arrays)
            values[i] = a
            return scalar(values)

        errors.append(rel_error(t.grad, numeric_gradient(f, arrays[i], h)))
    return errors
