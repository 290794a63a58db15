"""Adam optimizer: update math, frozen masking, and name-keyed state."""

import numpy as np
import pytest

import hcrnet.tensor as T
from hcrnet.errors import ConfigError
from hcrnet.optim import Adam


def test_first_step_matches_hand_computed_update():
    p = T.Parameter(np.array([1.0, -2.0]), "p")
    p.grad = np.array([0.5, -1.0])
    opt = Adam([p], learning_rate=0.1)
    opt.step()
    # t=1: m_hat = g, v_hat = g*g, update = g / (|g| + eps) = sign(g)
    expected = np.array([1.0, -2.0]) - 0.1 * np.array([0.5, -1.0]) / (
        np.abs([0.5, -1.0]) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-7)


def test_decoupled_weight_decay_shrinks_even_with_zero_moment_direction():
    p = T.Parameter(np.array([10.0]), "p")
    p.grad = np.array([1.0])
    plain = Adam([p], learning_rate=0.1)
    plain.step()
    value_plain = p.data.copy()

    q = T.Parameter(np.array([10.0]), "q")
    q.grad = np.array([1.0])
    decayed = Adam([q], learning_rate=0.1, weight_decay=0.5)
    decayed.step()
    np.testing.assert_allclose(q.data, value_plain - 0.1 * 0.5 * 10.0, rtol=1e-7)


def test_frozen_parameters_are_skipped_entirely():
    p = T.Parameter(np.array([1.0]), "p", frozen=True)
    p.grad = np.array([999.0])
    opt = Adam([p], learning_rate=0.1)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0])
    assert "p" not in opt._state


def test_missing_gradient_is_skipped():
    p = T.Parameter(np.array([1.0]), "p")
    opt = Adam([p], learning_rate=0.1)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0])


def test_state_survives_freeze_unfreeze_cycle():
    p = T.Parameter(np.array([1.0]), "p")
    opt = Adam([p], learning_rate=0.01)
    p.grad = np.array([1.0])
    opt.step()
    t_before = opt._state["p"]["t"]
    p.frozen = True
    p.grad = np.array([1.0])
    opt.step()
    assert opt._state["p"]["t"] == t_before
    p.frozen = False
    p.grad = np.array([1.0])
    opt.step()
    assert opt._state["p"]["t"] == t_before + 1


def test_zero_grad_clears_gradients():
    p = T.Parameter(np.array([1.0]), "p")
    p.grad = np.array([3.0])
    opt = Adam([p], learning_rate=0.1)
    opt.zero_grad()
    assert p.grad is None


def test_config_validation():
    p = T.Parameter(np.ones(1), "p")
    with pytest.raises(ConfigError):
        Adam([p], learning_rate=0.0)
    with pytest.raises(ConfigError):
        Adam([p], learning_rate=0.1, weight_decay=-1.0)
    with pytest.raises(ConfigError):
        Adam([p, T.Parameter(np.ones(1), "p")], learning_rate=0.1)


def test_adam_reduces_quadratic_loss():
    p = T.Parameter(np.array([5.0, -3.0]), "p")
    opt = Adam([p], learning_rate=0.2)
    for _ in range(200):
        loss = T.tsum(T.mul(p, p))
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert np.abs(p.data).max() < 0.1
