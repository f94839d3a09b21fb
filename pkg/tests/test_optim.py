import numpy as np
import pytest

from vitrojan.error import UsageError
from vitrojan.optim import SGD, Adam, make_optimizer
from vitrojan.tensor import Tensor


def _params():
    return {'w': Tensor([1.0, 2.0, 3.0], requires_grad=True),
            'frozen': Tensor([5.0])}


def test_sgd_step():
    params = _params()
    opt = SGD(params, lr=0.5)
    assert list(opt.params) == ['w']

    params['w'].grad = np.array([1.0, 0.0, -2.0])
    opt.step()
    assert np.array_equal(params['w'].data, [0.5, 2.0, 4.0])


def test_sgd_momentum():
    params = _params()
    opt = SGD(params, lr=1.0, momentum=0.5)
    for _ in range(2):
        params['w'].grad = np.ones(3)
        opt.step()
    # steps of 1 and 1.5
    assert np.allclose(params['w'].data, [-1.5, -0.5, 0.5])


def test_adam_first_step_is_lr_sized():
    params = _params()
    opt = Adam(params, lr=0.1)
    params['w'].grad = np.array([10.0, -0.01, 3.0])
    opt.step()
    assert np.allclose(params['w'].data, [0.9, 2.1, 2.9], atol=1e-6)


def test_mask_keeps_entries_bit_identical():
    params = _params()
    before = params['w'].data.copy()
    opt = make_optimizer('adam', params, 0.1, masks={'w': np.array([True, False, True])})
    params['w'].grad = np.array([1.0, 1.0, 1.0])
    opt.step()
    assert params['w'].data[1] == before[1]
    assert params['w'].data[0] != before[0]


def test_step_hook_and_zero_grad():
    calls = []
    params = _params()
    opt = make_optimizer('sgd', params, 0.1, step_hook=lambda p: calls.append(sorted(p)))
    params['w'].grad = np.ones(3)
    opt.step()
    opt.zero_grad()
    assert calls == [['w']]
    assert params['w'].grad is None


def test_errors():
    with pytest.raises(UsageError, match="Unknown optimizer"):
        make_optimizer('rmsprop', _params(), 0.1)

    with pytest.raises(UsageError, match="Invalid learning rate"):
        SGD(_params(), lr=-1)
