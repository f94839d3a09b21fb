import numpy as np
import pytest

from vitrojan.error import DimensionError, NumericError, UsageError
from vitrojan.tensor import (Tensor, ComputeGraph, add, backward, concat, cross_entropy, expand, gelu,
                             layernorm, matmul, mean, mul, neg, no_grad, normalize, one_hot, reshape,
                             slice_axis, softmax, square, sub, tensor_sum, transpose)
from .utils_for_tests import gradient_errors

TOLERANCE = 1e-4

_rng = np.random.default_rng(7)


def _randn(*shape):
    return _rng.normal(size=shape)


def _positive(*shape):
    return _rng.uniform(0.5, 2.0, size=shape)


@pytest.mark.parametrize(
    "fn, arrays", [
        (add, (_randn(3, 4), _randn(3, 4))),
        (add, (_randn(2, 3, 4), _randn(4))),
        (lambda a: add(a, 2.5), (_randn(3, 2),)),
        (sub, (_randn(3, 4), _randn(3, 4))),
        (sub, (_randn(5, 4), _randn(4))),
        (neg, (_randn(2, 2),)),
        (mul, (_randn(3, 4), _randn(3, 4))),
        (mul, (_randn(2, 3, 4), _randn(4))),
        (square, (_randn(3, 3),)),
        (matmul, (_randn(3, 4), _randn(4, 2))),
        (matmul, (_randn(2, 3, 4), _randn(4, 5))),
        (matmul, (_randn(2, 2, 3, 4), _randn(2, 2, 4, 3))),
        (lambda a: reshape(a, (6, 2)), (_randn(3, 4),)),
        (lambda a: transpose(a, (2, 0, 1)), (_randn(2, 3, 4),)),
        (lambda a: a[..., 1:3], (_randn(2, 3, 4),)),
        (lambda a: a[:, 0, :], (_randn(2, 3, 4),)),
        (lambda a: slice_axis(a, 1, 1, 3), (_randn(2, 4, 3),)),
        (lambda a, b: concat([a, b], axis=1), (_randn(2, 1, 3), _randn(2, 4, 3))),
        (lambda a: expand(a, 3), (_randn(2, 4),)),
        (lambda a: tensor_sum(a, axis=1), (_randn(3, 4, 2),)),
        (lambda a: tensor_sum(a, axis=(0, 2), keepdims=True), (_randn(3, 4, 2),)),
        (lambda a: mean(a, axis=-1), (_randn(3, 5),)),
        (lambda a: mean(a), (_randn(3, 5),)),
        (lambda a: softmax(a, axis=-1), (_randn(3, 5),)),
        (lambda a: softmax(a, axis=0), (_randn(4, 2),)),
        (lambda a: normalize(a, axis=-1), (_positive(3, 4),)),
        (gelu, (_randn(4, 3),)),
        (layernorm, (_randn(2, 3, 6), _positive(6), _randn(6))),
        (lambda z: cross_entropy(z, [0, 2, 1]), (_randn(3, 4),)),
    ]
)
def test_kernel_gradients(fn, arrays):
    errors = gradient_errors(fn, *arrays)
    assert max(errors) < TOLERANCE


def test_cross_entropy_value():
    logits = Tensor([[0.0, 0.0], [1.0, 3.0]])
    loss = cross_entropy(logits, [0, 1])
    expected = (np.log(2.0) + np.log(1 + np.exp(-2.0))) / 2
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_errors():
    with pytest.raises(DimensionError, match="labels must lie in"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    with pytest.raises(DimensionError, match="disagree"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0])


def test_softmax_large_inputs():
    s = softmax(Tensor([[1000.0, 1000.0, -1000.0]]))
    assert np.allclose(s.data, [[0.5, 0.5, 0.0]])

    rows = softmax(Tensor(_rng.normal(scale=300.0, size=(6, 17)))).data
    assert np.all(np.abs(rows.sum(axis=-1) - 1.0) <= 1e-12)
    assert rows.min() >= 0.0


def test_normalize_zero_sum():
    with pytest.raises(NumericError, match="zero sum"):
        normalize(Tensor([[1.0, -1.0]]))


def test_broadcast_rules():
    a = Tensor(np.ones((2, 3)))
    with pytest.raises(DimensionError, match="incompatible shapes"):
        add(a, Tensor(np.ones(2)))

    with pytest.raises(DimensionError, match="inner dimensions"):
        matmul(a, Tensor(np.ones((2, 2))))

    with pytest.raises(DimensionError):
        reshape(a, (4,))


def test_gradient_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(tensor_sum(square(x)))
    backward(tensor_sum(square(x)))
    assert np.array_equal(x.grad, [4.0, 8.0])


def test_shared_input():
    x = Tensor([3.0], requires_grad=True)
    y = mul(x, x)
    backward(tensor_sum(add(y, x)))
    assert x.grad[0] == pytest.approx(7.0)


def test_no_grad():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = square(x)
    assert not y.requires_grad

    with pytest.raises(UsageError, match="does not require gradients"):
        backward(tensor_sum(y))


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError, match="scalar loss"):
        backward(square(x))


def test_non_finite_values():
    with pytest.raises(NumericError):
        Tensor([np.nan])

    with pytest.raises(NumericError, match="mul produced non-finite"):
        mul(Tensor([1e200]), Tensor([1e200]))


def test_compute_graph():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2))
    c = tensor_sum(mul(add(a, b), 2.0))
    graph = ComputeGraph(c)
    assert graph.leaves() == [a]
    assert graph.nodes[-1] is c


def test_operators():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0, 5.0]])
    assert np.array_equal((a + b).data, [[4.0, 7.0]])
    assert np.array_equal((a - b).data, [[-2.0, -3.0]])
    assert np.array_equal((2 * a).data, [[2.0, 4.0]])
    assert np.array_equal((1.0 - a).data, [[0.0, -1.0]])
    assert np.array_equal((a / 2).data, [[0.5, 1.0]])
    assert np.array_equal((a @ b.T).data, [[13.0]])
    assert a.T.shape == (2, 1)


def test_one_hot():
    assert np.array_equal(one_hot([2, 0], 3), [[0, 0, 1], [1, 0, 0]])


def test_non_finite_gradient():
    x = Tensor([1e-300], requires_grad=True, name='x')
    y = mul(mul(x, Tensor([1e300])), Tensor([1e300]))
    assert np.isfinite(y.data).all()

    with np.errstate(over='ignore'), pytest.raises(NumericError, match="gradient of 'x'"):
        backward(tensor_sum(y))
