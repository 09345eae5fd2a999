import numpy as np
import pytest

from adapterfusion.autodiff import Tensor
from adapterfusion.errors import ConfigError, UsageError
from adapterfusion.optim import OptimizerState, adamw_step, constant_schedule, linear_decay_schedule


def test_single_step_oracle():
    w = Tensor([1.0], trainable=True)
    w.grad = np.array([1.0])
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    adamw_step([w], state)
    # m_hat = v_hat = 1, so the update is lr * 1 / (1 + eps)
    assert w.data[0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert w.data[0] == pytest.approx(0.9, abs=1e-8)
    assert state.step == 1


def test_decoupled_weight_decay():
    w = Tensor([2.0], trainable=True)
    w.grad = np.array([0.0])
    adamw_step([w], OptimizerState(lr=0.1, weight_decay=0.5))
    assert w.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-15)


def test_zero_grad_zero_decay_unchanged():
    w = Tensor([1.5, -2.0], trainable=True)
    w.grad = np.zeros(2)
    before = w.data.copy()
    adamw_step([w], OptimizerState(lr=0.1))
    np.testing.assert_array_equal(w.data, before)


def test_frozen_param_untouched():
    w = Tensor([1.0, 2.0], trainable=False)
    w.grad = np.array([5.0, -5.0])
    before = w.data.tobytes()
    adamw_step([w], OptimizerState(lr=0.1, weight_decay=0.1))
    assert w.data.tobytes() == before


def test_missing_grad_is_usage_error():
    with pytest.raises(UsageError):
        adamw_step([Tensor([1.0], trainable=True)], OptimizerState())


def test_step_counter_and_moment_shapes():
    w = Tensor(np.ones((2, 3)), trainable=True)
    state = OptimizerState()
    for k in range(3):
        w.grad = np.full((2, 3), 0.5)
        adamw_step([w], state)
        assert state.step == k + 1
    assert state.m[id(w)].shape == (2, 3) and state.v[id(w)].shape == (2, 3)


def test_linear_decay_schedule():
    assert linear_decay_schedule(0, 10, 1e-4) == 1e-4
    assert linear_decay_schedule(10, 10, 1e-4) == 0.0
    assert linear_decay_schedule(5, 10, 1e-4) == pytest.approx(5e-5, abs=1e-20)
    with pytest.raises(ConfigError):
        linear_decay_schedule(0, 0, 1e-4)


def test_constant_schedule():
    assert constant_schedule(7, 10, 3e-4) == 3e-4
